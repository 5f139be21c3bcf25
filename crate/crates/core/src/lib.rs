//! Core of the negotiation lab: the bargaining game, the recurrent policy,
//! supervised and self-play training, targeted data acquisition from an
//! expert partner, and evaluation metrics.

pub mod env;
pub mod model;
pub mod corpus;
pub mod training;
pub mod acquisition;
pub mod metrics;
pub mod experiment;
