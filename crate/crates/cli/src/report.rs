use serde::Serialize;

/// Top-level wrapper shared by every report.
#[derive(Debug, Serialize)]
pub struct Envelope<'a, T> {
    pub schema_version: u32,
    pub command: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    pub warnings: Vec<String>,
    pub report: T,
}

/// A computation that may be inapplicable; serialized as the value itself
/// or as `{"error": "..."}`.
#[derive(Debug, Serialize)]
#[serde(untagged)]
pub enum Outcome<T> {
    Ok(T),
    Err { error: String },
}

impl<T> From<stratperm::Result<T>> for Outcome<T> {
    fn from(r: stratperm::Result<T>) -> Self {
        match r {
            Ok(v) => Outcome::Ok(v),
            Err(e) => Outcome::Err {
                error: e.to_string(),
            },
        }
    }
}
