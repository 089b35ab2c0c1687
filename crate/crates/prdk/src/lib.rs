pub mod artifacts;
pub mod autodiff;
pub mod dataio;
pub mod gates;
pub mod optimizer;
pub mod prune;
pub mod regularizers;
pub mod schema;
pub mod search;
pub mod supernet;
pub mod tensor;
pub mod theory;
