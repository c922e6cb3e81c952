# Expose models package
