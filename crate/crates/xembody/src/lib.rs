//! Cross-embodiment imitation learning on a desk-scale synthetic platform:
//! unified-frame teleoperation retargeting with safety filtering, a
//! modality-aligned episode format, a modular transformer policy with a
//! shared trunk, and a two-embodiment kinematic evaluation harness.

pub mod dataset;
pub mod embodiment;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod mxt;
pub mod nn;
pub mod retarget;
pub mod training;
