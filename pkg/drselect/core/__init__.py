"""Core selection algorithms: data model, retrieval, LLM gateway, metrics,
fusion, the LARMOR pipeline, baselines, and evaluation."""
