//! Desk-scale testbed for joint uplink/downlink CSI acquisition in TDD
//! massive MIMO-OFDM: synthetic multipath channels, CSI-RS/SRS pilot
//! observation, quantized feedback, attention/SSM-based reconstruction and
//! prediction, classical baselines, and transmission-quality metrics.

pub mod channel;
pub mod codec;
pub mod dataset;
pub mod estimators;
pub mod hascan;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod pilot;
pub mod tensor;
pub mod train;
