pub mod backend;
pub mod bankfns;
pub mod coarse;
pub mod error;
pub mod gf2;
pub mod knowledge;
pub mod mapping;
pub mod timing;
pub mod fine;
pub mod hammer;
pub mod fixtures;
pub mod pipeline;
pub mod report;
pub mod cli;
