"""Network harness: profiles, shaping proxy and the latency/throughput bench."""
