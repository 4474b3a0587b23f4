//! The unified embedding space: projection head, memory bank, prototype
//! bank and the two contrastive objectives defined over them.

mod bank;
mod loss;
mod projection;
mod prototype;

pub use bank::{BankEntry, MemoryBank, Snapshot};
pub use loss::{pscl_loss, sscl_loss, Temperature};
pub use projection::ProjectionHead;
pub use prototype::{project_prototypes, PrototypeBank, ProjectedPrototypes};
