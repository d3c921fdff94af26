pub mod error;
pub mod image;
pub mod introspect;
pub mod losses;
pub mod model;
pub mod numcore;
pub mod recipe;
pub mod registry;
pub mod sequence;
pub mod synthdata;
pub mod teacher;
pub mod trainpipe;
pub mod verify;

pub use error::{Error, Result};
