//! Serialized (pointer-free) representations of recursive algebraic datatypes.
//!
//! A datatype can be stored *flat* (every field and subtree inlined into one
//! buffer, in preorder) or *factored* (constructor tags in one buffer, each
//! non-self-recursive field in its own buffer, coordinated by traversal
//! order). The crate provides:
//!
//! * [`schema`] — datatype definitions with per-datatype layout annotations
//!   and the buffer-shape computation that drives everything else.
//! * [`region`] — growable chunk-list byte regions with bump allocation,
//!   redirection records, and reference-counted reclamation.
//! * [`layout`] — serialization, deserialization, indirection and
//!   random-access records, and the `.fadt` container file format.
//! * [`traversal`] — schema-driven folds and maps over serialized values with
//!   immutable/mutable cursor modes, dead-field skipping, and deterministic
//!   byte/step counters.
//! * [`socal`] — an executable location calculus: parser, typechecker, store
//!   interpreter, end-witness computation, store well-formedness checking,
//!   and a type-safety fuzzer.
//! * [`bench`] — input generators and an experiment runner producing
//!   table/JSON/CSV reports.

pub mod bench;
pub mod layout;
pub mod region;
pub mod schema;
pub mod socal;
pub mod traversal;

pub use layout::{deserialize, serialize, SerializedRoot, Value};
pub use region::{Address, RegionId, RegionStore};
pub use schema::{AdtSchema, BufferShape, Layout};
