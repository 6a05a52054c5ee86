use defnet::Error;

/// A failed command. Each kind maps to its own exit code and is reported as
/// one JSON line on stderr.
#[derive(Debug)]
pub enum Failure {
    Clap(clap::Error),
    Usage(String),
    Core(Error),
    /// A self-check ran but exceeded its tolerance.
    Check(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn from_clap(e: clap::Error) -> Self {
        Failure::Clap(e)
    }

    /// `(kind, exit code)`.
    fn kind(&self) -> (&'static str, u8) {
        match self {
            Failure::Clap(_) | Failure::Usage(_) => ("usage", 2),
            Failure::Check(_) => ("check_failed", 7),
            Failure::Core(e) => match e {
                Error::MissingFile(_) => ("missing_file", 3),
                Error::Malformed { .. } | Error::Validation(_) | Error::Version { .. } => ("schema", 4),
                Error::InvalidArgument(_) | Error::ShapeMismatch { .. } | Error::Geometry { .. } => ("invalid_argument", 5),
                Error::NonFinite(_) | Error::Diverged(_) => ("numeric", 6),
                Error::Io { .. } => ("io", 1),
            },
        }
    }

    pub fn code(&self) -> u8 {
        self.kind().1
    }

    fn message(&self) -> String {
        match self {
            // clap renders a multi-line usage block; its first line names the problem.
            Failure::Clap(e) => e
                .to_string()
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ")
                .to_string(),
            Failure::Usage(m) | Failure::Check(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        }
    }

    pub fn line(&self) -> String {
        let (kind, code) = self.kind();
        serde_json::json!({ "error": kind, "code": code, "message": self.message() }).to_string()
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}
