pub mod template;
pub mod hierarchy;
pub mod corpus;
pub mod providers;
pub mod retrieval;
pub mod pipeline;
pub mod verification;
pub mod evalkit;
pub mod run;
