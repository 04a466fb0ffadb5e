pub mod embedder;
pub mod embedding_store;
pub mod uncertainty;
pub mod tqfs;
pub mod llm_gateway;
pub mod session;
pub mod eval;
pub mod synthetic;
