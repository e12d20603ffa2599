pub mod backbone;
pub mod codec;
pub mod data;
pub mod evaluation;
pub mod harness;
pub mod matching;
pub mod numerics;
pub mod promptpool;
pub mod training;
