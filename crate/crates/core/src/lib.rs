pub mod agents;
pub mod builders;
pub mod demo;
pub mod ensemble;
pub mod ingestion;
pub mod knowledge;
pub mod llm;
pub mod orchestrator;
pub mod prompts;
pub mod util;
pub mod workspace;
