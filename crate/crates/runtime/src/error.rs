use thiserror::Error;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("cannot lower node '{node}': {msg}")]
    Lowering { node: String, msg: String },

    #[error("integer overflow at node '{node}': {detail}")]
    Overflow { node: String, detail: String },

    #[error("value out of range for {bits}-bit {kind}: {value}", kind = if *signed { "signed" } else { "unsigned" })]
    Range { value: i64, bits: u32, signed: bool },

    #[error("lowered graph parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid lowered graph at node '{node}': {msg}")]
    Invalid { node: String, msg: String },

    #[error(transparent)]
    Graph(#[from] tqt_graph::GraphError),

    #[error(transparent)]
    Core(#[from] tqt_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RuntimeError {
    pub fn lowering(node: impl Into<String>, msg: impl Into<String>) -> Self {
        RuntimeError::Lowering {
            node: node.into(),
            msg: msg.into(),
        }
    }

    pub fn invalid(node: impl Into<String>, msg: impl Into<String>) -> Self {
        RuntimeError::Invalid {
            node: node.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = RuntimeError> = std::result::Result<T, E>;
