pub mod agents;
pub mod compress;
pub mod data_pipeline;
pub mod embed_store;
pub mod eval_harness;
pub mod event_model;
pub mod nl_io;
pub mod prompt_factory;
pub mod seq_model;
