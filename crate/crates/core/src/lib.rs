pub mod autodiff;
pub mod numerics;
pub mod routing;
pub mod dynamics;
pub mod network;
pub mod experiments;
