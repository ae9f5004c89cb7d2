"""End-to-end desk run through the command-line interface.

Builds a store for a few sampled architectures, then correlates metrics and
benchmarks the searchers on it.  Run with ``python demos/desk_pipeline.py
[store_dir]`` (a few minutes).  Rerunning resumes from the finished work.
"""

import json
import sys

from archrobust import cli

store = sys.argv[1] if len(sys.argv) > 1 else "demo_store"
common = ["--store", store]

# 1. gather: train, attack and corrupt 8 architectures (reduced Square budget)
cli.main(["build-dataset", *common, "--n-archs", "8", "--n-test", "32", "--square-iterations", "300"])

# 2. single values
cli.main(["query", *common, "--best", "--key", "fgsm", "--index", "2"])

# 3. rank correlation between clean, one attack and the means
cli.main(["analyze", "correlation", *common, "--metrics", "clean", "fgsm@2", "mean_adversarial", "mean_corruption", "--out", f"{store}/_results/corr"])

# 4. searchers on the robustness objective
# (8 architectures only, so a small evolution population and budget)
settings = '{"regularized_evolution": {"population": 4, "sample": 2}, "bananas_lite": {"warmup": 4}}'
cli.main(["search", *common, "--objectives", "fgsm@2", "--runs", "5", "--budget", "6", "--set", f"search.settings={settings}", "--out", f"{store}/_results/search"])
with open(f"{store}/_results/search/report.json") as fh:
    print(json.dumps(json.load(fh)["rows"], indent=1))
