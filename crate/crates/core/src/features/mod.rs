//! Feature containers, dataset manifests and the planted-signal generator.

mod bundle;
mod manifest;
mod synth;

pub use bundle::{read_bundle, write_bundle, FeatureBundle, AVQF_MAGIC, AVQF_VERSION};
pub use manifest::{
    decode_question_features, encode_question_features, load_split, read_question_features,
    validate_disjoint, write_question_features, Dataset, DatasetManifest, ManifestEntry, Modality,
    Planted, QASample, QuestionKind, QuestionType, Split, AVQQ_MAGIC,
};
pub use synth::{generate_synthetic, write_dataset, GeneratedDataset, SynthConfig};
