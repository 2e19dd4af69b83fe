//! Building blocks for auditing and monitoring a language-model document
//! classifier: corpus preparation, class schemas, prompt construction, model
//! access, alignment analysis, statistics, few-shot selection, robustness
//! checks, drift monitoring, and a run store.

pub mod alignment;
pub mod corpus;
pub mod drift;
pub mod fewshot;
pub mod gateway;
pub mod prompting;
pub mod schema;
pub mod seqval;
pub mod stats;
pub mod store;
pub mod synthetic;
