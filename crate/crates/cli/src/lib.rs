//! File formats, dataset layout, run configuration and the subcommands of
//! the `ovd` tool. The numeric work lives in `ovd-core`.

pub mod checkpoint;
pub mod coco;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod manifest;
pub mod pngio;
pub mod report;
