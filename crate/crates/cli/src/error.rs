use thiserror::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_SHAPE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] codicast::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use codicast::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Core(e) => match e {
                E::Config(_) => EXIT_CONFIG,
                E::Shape(_) | E::Version(_) | E::UnknownParam(_) | E::DuplicateParam(_) => EXIT_SHAPE,
                _ => EXIT_DATA,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
