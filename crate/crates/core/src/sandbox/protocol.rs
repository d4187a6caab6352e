//! Line-oriented wire records exchanged with the kernel shim.
//!
//! Every record is one JSON object on one line; newlines inside strings are
//! escaped by the encoder.

use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Hello,
    Exec,
    IntrospectAttrs,
    IntrospectNames,
    Reset,
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub op: Op,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline_ms: Option<u64>,
}

impl Request {
    pub fn new(id: u64, op: Op) -> Self {
        Self {
            id,
            op,
            code: None,
            expr: None,
            deadline_ms: None,
        }
    }

    pub fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("request serializes");
        line.push('\n');
        line
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireFrame {
    pub file: String,
    pub line: u32,
    pub name: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireTraceback {
    pub etype: String,
    pub evalue: String,
    #[serde(default)]
    pub frames: Vec<WireFrame>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub id: Option<u64>,
    pub status: ResponseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stdout: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traceback: Option<WireTraceback>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default)]
    pub duration_ms: u64,
}

impl Response {
    pub fn parse(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_encoding_is_one_line() {
        let mut req = Request::new(3, Op::Exec);
        req.code = Some("a = 1\nprint(a)".into());
        req.deadline_ms = Some(500);
        let line = req.to_line();
        assert_eq!(
            line,
            "{\"id\":3,\"op\":\"exec\",\"code\":\"a = 1\\nprint(a)\",\"deadline_ms\":500}\n"
        );
        assert_eq!(line.matches('\n').count(), 1);
        assert_eq!(
            Request::new(0, Op::IntrospectNames).to_line(),
            "{\"id\":0,\"op\":\"introspect_names\"}\n"
        );
    }

    #[test]
    fn response_decoding() {
        let r = Response::parse(
            r#"{"id":null,"status":"error","traceback":{"etype":"ProtocolError","evalue":"x","frames":[]},"duration_ms":0}"#,
        )
        .unwrap();
        assert_eq!(r.id, None);
        assert_eq!(r.traceback.unwrap().etype, "ProtocolError");
    }
}
