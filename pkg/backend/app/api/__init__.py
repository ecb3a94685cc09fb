# API routers
