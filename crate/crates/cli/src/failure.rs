use std::fmt;

/// A failed command, reported on stderr as one JSON line.
#[derive(Debug)]
pub struct Failure {
    /// `usage`, `input`, `config` or `runtime`.
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn input(message: impl fmt::Display) -> Self {
        Self {
            kind: "input",
            message: message.to_string(),
        }
    }

    pub fn config(message: impl fmt::Display) -> Self {
        Self {
            kind: "config",
            message: message.to_string(),
        }
    }

    pub fn runtime(message: impl fmt::Display) -> Self {
        Self {
            kind: "runtime",
            message: message.to_string(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind, "message": self.message }).to_string()
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            "usage" => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}
