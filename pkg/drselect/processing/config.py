"""
Default configuration values: pipeline constants, HTTP and LLM settings,
environment variable names.

Every value can be overridden by the JSON run config or a command line
flag, see run_config.py.
"""
# LARMOR pipeline
sample_size = 100           # k, documents sampled from the target corpus
queries_per_doc = 10        # l, pseudo-queries generated per document
judge_depth = 100           # m, fused documents judged / reranked per query
retrieval_depth = 1000      # documents retrieved per query and retriever
rrf_k = 60                  # reciprocal rank fusion constant
rbo_p = 0.9                 # rank-biased overlap persistence
ndcg_cutoff = 10
seed = 0

# Generation
top_p = 0.9
temperature = 1.0
max_tokens = 64
prompt_domain = "wikipedia"

# Setwise reranking
setwise_set_size = 3
setwise_token_budget = 128  # whitespace tokens kept per candidate

# Mock LLM
mock_query_terms = 4        # terms per generated mock query
mock_overlap_threshold = 0.5

# QPP baselines
qpp_top_k = 100
qpp_norm_depth = 100
sigma_max_fraction = 0.5
entropy_top_k = 10
alteration_variants = 5
clarity_lambda = 0.6

# HTTP (search and LLM services)
http_timeout_ms = 30000
http_max_retries = 3
http_backoff_s = 0.25       # first retry wait, doubled on each retry
http_max_in_flight = 8
llm_concurrency_cap = 8

# Environment variables
http_timeout_env = "DRSELECT_HTTP_TIMEOUT_MS"
llm_api_key_env = "DRSELECT_LLM_API_KEY"

# Logging
log_level = "INFO"
