pub mod cli;
pub mod dataset;
pub mod edmd;
pub mod metrics;
pub mod networks;
pub mod numerics;
pub mod odeint;
pub mod systems;
pub mod trainer;
