pub mod config;
pub mod dataset;
pub mod gp;
pub mod harness;
pub mod mpc;
pub mod net;
pub mod plant;
pub mod policy;
pub mod sensitivity;
pub mod simloop;
pub mod sobol;
pub mod tuner;
