//! Wire messages exchanged with worker processes, one JSON object per line.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Render,
    Script,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub task_id: String,
    pub kind: TaskKind,
    pub code: String,
    pub timeout_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub task_id: String,
    pub status: String,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact_b64: Option<String>,
    #[serde(default)]
    pub wall_ms: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_line_shape() {
        let r = WireRequest {
            task_id: "t1".into(),
            kind: TaskKind::Script,
            code: "print(1)".into(),
            timeout_s: 1.5,
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"task_id":"t1","kind":"script","code":"print(1)","timeout_s":1.5}"#
        );
    }

    #[test]
    fn response_without_artifact() {
        let r: WireResponse = serde_json::from_str(
            r#"{"task_id":"a","status":"ok","stdout":"1\n","stderr":"","wall_ms":3}"#,
        )
        .unwrap();
        assert_eq!(r.artifact_b64, None);
        assert!(!serde_json::to_string(&r).unwrap().contains("artifact_b64"));
    }
}
