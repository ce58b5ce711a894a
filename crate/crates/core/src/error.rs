use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("backward called before a forward pass was recorded")]
    BackwardBeforeForward,

    #[error("loss node is not a scalar")]
    NonScalarLoss,

    #[error("class label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("empty class {class_id}: cannot balance an epoch")]
    EmptyClass { class_id: usize },

    #[error("augmentation requires a square image, got {height}x{width}")]
    NonSquareImage { height: usize, width: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    #[error("cannot read image {path}: {detail}")]
    ImageRead { path: PathBuf, detail: String },

    #[error("label '{label}' in domain '{domain}' is missing from the harmonization map")]
    UnmappedLabel { domain: String, label: String },

    #[error("dataset root {0} contains no class folders")]
    EmptyDatasetRoot(PathBuf),

    #[error("manifest parse error at {path}:{line}: {detail}")]
    ManifestParse { path: PathBuf, line: usize, detail: String },

    #[error("checkpoint {path}: {kind}")]
    Checkpoint { path: PathBuf, kind: CheckpointError },

    #[error("classifier activations missing: run a forward pass before explaining")]
    MissingActivations,

    #[error("cannot write to {path}: {detail}")]
    OutputWrite { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (not an NCAC checkpoint)")]
    BadMagic,
    #[error("unknown format version {0}")]
    UnknownVersion(u32),
    #[error("truncated file")]
    Truncated,
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("parameter array '{name}' has wrong shape: {detail}")]
    BadArray { name: String, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
