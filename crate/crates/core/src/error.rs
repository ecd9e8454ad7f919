use thiserror::Error;

/// Errors raised anywhere in the solver pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Invalid or inconsistent run configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Terrain the merging scheme cannot handle (e.g. a narrow v-shaped valley).
    #[error("unsupported terrain: {0}")]
    UnsupportedTerrain(String),
    /// Broken internal invariant.
    #[error("internal error: {0}")]
    Internal(String),
    /// Operations executed in the wrong order.
    #[error("sequencing error: {0}")]
    Sequencing(String),
    #[error("numerical blow-up at step {step}: {detail}")]
    BlowUp { step: u64, detail: String },
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with all context layers stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(
            self.root(),
            Error::Config(_) | Error::Domain(_) | Error::UnsupportedTerrain(_)
        )
    }

    pub fn is_blow_up(&self) -> bool {
        matches!(self.root(), Error::BlowUp { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait ResultExt<T> {
    fn ctx<F: FnOnce() -> String>(self, f: F) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn ctx<F: FnOnce() -> String>(self, f: F) -> Result<T> {
        self.map_err(|e| e.context(f()))
    }
}
