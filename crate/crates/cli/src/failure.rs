/// Command failures, each with its own exit code.
#[derive(Debug)]
pub enum Failure {
    Core(duet_core::Error),
    Config(String),
    MissingCheckpoint(String),
    MissingInput(String),
}

impl From<duet_core::Error> for Failure {
    fn from(e: duet_core::Error) -> Self {
        match e {
            duet_core::Error::Config(m) => Failure::Config(m),
            duet_core::Error::Json(j) => Failure::Config(j.to_string()),
            other => Failure::Core(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl Failure {
    pub fn category(&self) -> &'static str {
        match self {
            Failure::Core(e) => e.category(),
            Failure::Config(_) => "config",
            Failure::MissingCheckpoint(_) => "missing_checkpoint",
            Failure::MissingInput(_) => "missing_input",
        }
    }

    /// 2 is left to argument parsing.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 3,
            "missing_checkpoint" => 4,
            "tokenizer_mismatch" => 5,
            "checkpoint" => 6,
            "missing_input" => 7,
            "bad_magic" | "truncated" => 8,
            "dimension_mismatch" | "invalid_input" => 9,
            "unsupported_skeleton" => 10,
            "unknown_class" => 11,
            "mode_mismatch" => 12,
            "diverged" => 13,
            "io" => 14,
            _ => 1,
        }
    }

    pub fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::Config(m) => m.clone(),
            Failure::MissingCheckpoint(p) => format!("checkpoint not found: {p}"),
            Failure::MissingInput(m) => m.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_have_distinct_codes() {
        let cases = [
            Failure::Config("x".into()),
            Failure::MissingCheckpoint("x".into()),
            Failure::Core(duet_core::Error::TokenizerMismatch { expected: "a".into(), found: "b".into() }),
            Failure::Core(duet_core::Error::Checkpoint("x".into())),
            Failure::MissingInput("x".into()),
        ];
        let mut codes: Vec<i32> = cases.iter().map(Failure::exit_code).collect();
        assert!(codes.iter().all(|&c| c > 2));
        codes.sort();
        codes.dedup();
        assert_eq!(codes.len(), cases.len());
    }
}
