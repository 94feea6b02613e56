use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("parse error at line {line} (node '{node}'): {msg}")]
    Parse { line: usize, node: String, msg: String },

    #[error("invalid graph at node '{node}': {msg}")]
    Invalid { node: String, msg: String },

    #[error("transform error at node '{node}': {msg}")]
    Transform { node: String, msg: String },

    #[error("execution error at node '{node}': {source}")]
    Exec {
        node: String,
        #[source]
        source: tqt_core::Error,
    },

    #[error(transparent)]
    Core(#[from] tqt_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GraphError {
    pub fn invalid(node: impl Into<String>, msg: impl Into<String>) -> Self {
        GraphError::Invalid {
            node: node.into(),
            msg: msg.into(),
        }
    }

    pub fn transform(node: impl Into<String>, msg: impl Into<String>) -> Self {
        GraphError::Transform {
            node: node.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;
