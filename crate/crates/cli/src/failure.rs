use hiersample_service::ServiceError;

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    pub fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Data(e) | Failure::Runtime(e) => format!("{e:#}"),
        }
    }
}

impl From<hiersample::Error> for Failure {
    fn from(e: hiersample::Error) -> Self {
        use hiersample::Error::*;
        match e {
            Io(_) | Diverged { .. } | TooLong { .. } => Failure::Runtime(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Model(m) => m.into(),
            ServiceError::Io(_) => Failure::Runtime(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

/// Attaches context to a library result.
pub trait Context<T> {
    fn context(self, what: impl std::fmt::Display) -> Result<T, Failure>;
}

impl<T, E: Into<Failure>> Context<T> for Result<T, E> {
    fn context(self, what: impl std::fmt::Display) -> Result<T, Failure> {
        self.map_err(|e| match e.into() {
            Failure::Usage(m) => Failure::Usage(format!("{what}: {m}")),
            Failure::Data(e) => Failure::Data(e.context(what.to_string())),
            Failure::Runtime(e) => Failure::Runtime(e.context(what.to_string())),
        })
    }
}

/// Writing run artifacts failed.
pub fn io(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}
