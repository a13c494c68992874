//! Files, caching, remote clients and the `mop` command line around
//! [`mop_core`].

pub mod cache;
pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod remote;
pub mod toy;
