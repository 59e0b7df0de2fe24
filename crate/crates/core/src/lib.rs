pub mod data;
pub mod metrics;
pub mod microvlm;
pub mod numerics;
pub mod personalization;
pub mod probing;
pub mod tuning;
