"""Benchmark training budgets, kept in one place for tuning."""

BENCH_STEPS = {"wavenet": 2500, "rnn": 2000, "transformer": 1200}
BENCH_LR = {"wavenet": 1.5e-3, "rnn": 2e-3, "transformer": 1e-3}
