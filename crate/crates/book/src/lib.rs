#![doc = include_str!("../../../book/src/introduction.md")]

#[doc = include_str!("../../../book/src/grid-and-fields.md")]
pub mod grid_and_fields {}

#[doc = include_str!("../../../book/src/noise.md")]
pub mod noise {}

#[doc = include_str!("../../../book/src/dynamics.md")]
pub mod dynamics {}

#[doc = include_str!("../../../book/src/clt.md")]
pub mod clt {}

#[doc = include_str!("../../../book/src/large-deviations.md")]
pub mod large_deviations {}

#[doc = include_str!("../../../book/src/analysis.md")]
pub mod analysis {}

#[doc = include_str!("../../../book/src/running-experiments.md")]
pub mod running_experiments {}
