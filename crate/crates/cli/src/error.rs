use genepair::datasetgen::DatasetError;
use genepair::evalharness::EvalError;
use genepair::model::ModelError;
use genepair::seqcore::SeqError;
use genepair::toklab::TokError;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config: exit 1.
    Usage(String),
    /// Invalid input data or failed validation: exit 2.
    Data(String),
    /// Non-finite training loss: exit 3.
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "error: {m}"),
            CliError::Diverged(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::DivergedLoss { .. } | ModelError::NonFiniteLoss => CliError::Diverged(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::BadConfig(_) | DatasetError::BadFractions => CliError::Usage(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

data_error!(EvalError, SeqError, TokError);
