# Common validation schemas
