//! Latent-class generative models, contrastive tuple samplers and dataset I/O.

pub mod dataset;
pub mod io;
pub mod model;
pub mod sampling;
pub mod sequences;

pub use dataset::{ContrastiveDataset, DatasetProvenance, LabeledDataset, Split, TupleIndex};
pub use io::{load_dataset, load_feature_csv, save_dataset, NormStats};
pub use model::{ClassConditionals, LatentClassModel, SupportPoint};
pub use sampling::{contrastive_from_labeled, sample_contrastive_iid, sample_labeled};
pub use sequences::{build_noniid_from_sequences, Sequence, SequenceCorpusSpec, WindowOptions};
