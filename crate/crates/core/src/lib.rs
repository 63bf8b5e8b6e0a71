pub mod capacity;
pub mod field;
pub mod gram_ml;
pub mod markov;
pub mod protocol;
