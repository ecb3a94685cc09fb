# Services
