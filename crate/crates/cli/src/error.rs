use std::fmt;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: String) -> Self {
        Self {
            code: EXIT_USAGE,
            message,
        }
    }

    pub fn runtime(message: String) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message,
        }
    }

    /// Same message, reported as a runtime failure.
    pub fn as_runtime(self) -> Self {
        Self {
            code: EXIT_RUNTIME,
            ..self
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<limaml::Error> for CliError {
    fn from(e: limaml::Error) -> Self {
        use limaml::Error as E;
        let code = if e.is_numerical() {
            EXIT_DIVERGENCE
        } else {
            match e {
                E::Config(_) | E::MissingKey(_) | E::Architecture(_) | E::LayerShape { .. } | E::Shape(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}
