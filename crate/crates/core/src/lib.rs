pub mod credit;
pub mod distill;
pub mod experiment;
pub mod governance;
pub mod grpo;
pub mod policy;
pub mod reward;
pub mod stats;
pub mod toyfix;
pub mod trajectory;
