pub mod baselines;
pub mod cam;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod lopt;
pub mod memlab;
pub mod meta;
pub mod optimizee;
pub mod rf;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod topo;
pub mod tree;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use tree::{ParamTree, VarTree};
