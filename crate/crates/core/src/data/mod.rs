//! Mixed-type longitudinal records: schemas, tabular records, CSV I/O and
//! the encoded `B×1×L×N` tensor form.

mod batch;
pub mod fixtures;
mod schema;
mod table;

pub use batch::{argmax, decode, encode, encode_rows, recover_lengths, EpisodeBatch, PADDING_MASS_THRESHOLD};
pub use schema::{DatasetSchema, VariableKind, VariableSpec, PATIENT_ID_COLUMN};
pub use table::{load_csv, save_csv, Cell, Episode, Record, RecordTable};
