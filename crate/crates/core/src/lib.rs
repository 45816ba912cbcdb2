pub mod corpus;
pub mod embedding;
pub mod evaluation;
pub mod generation;
pub mod ingest;
pub mod retrieval;
pub mod service;
