pub mod flow;
pub mod sketch;
pub mod filter;
pub mod lookup;
pub mod distribution;
pub mod routing;
pub mod bypass;
pub mod adversary;
pub mod cluster;
