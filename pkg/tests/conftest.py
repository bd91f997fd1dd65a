from hypothesis import settings

# one reproducible database-free profile so suite runs are deterministic
settings.register_profile("ci", derandomize=True, deadline=None)
settings.load_profile("ci")
