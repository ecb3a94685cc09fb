# copula-vi backend
