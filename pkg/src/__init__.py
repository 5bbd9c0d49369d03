# Optimistic rollouts for pessimistic offline policy optimization
