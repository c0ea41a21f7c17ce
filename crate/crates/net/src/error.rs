use thiserror::Error;

pub type Result<T> = std::result::Result<T, NetError>;

/// Errors a worker reports back over the wire, and errors the client sees.
#[derive(Debug, Error)]
pub enum NetError {
    #[error("bad request: {0}")]
    BadRequest(String),

    #[error("id {0} already exists")]
    Duplicate(u64),

    #[error("incompatible parameters: {0}")]
    Incompatible(String),

    #[error("worker not ready: {0}")]
    NotReady(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("transport error talking to {addr}: {msg}")]
    Transport { addr: String, msg: String },

    #[error("{addr} answered {status} ({code}): {msg}")]
    Remote { addr: String, status: u16, code: String, msg: String },

    #[error("invalid cluster configuration: {0}")]
    Config(String),
}

impl NetError {
    pub fn status(&self) -> u16 {
        match self {
            NetError::BadRequest(_) => 400,
            NetError::Duplicate(_) | NetError::Incompatible(_) => 409,
            NetError::NotReady(_) => 503,
            NetError::Remote { status, .. } => *status,
            _ => 500,
        }
    }

    /// Short machine-readable code carried in the error envelope.
    pub fn code(&self) -> &str {
        match self {
            NetError::BadRequest(_) => "bad_request",
            NetError::Duplicate(_) => "duplicate",
            NetError::Incompatible(_) => "incompatible",
            NetError::NotReady(_) => "not_ready",
            NetError::Remote { code, .. } => code,
            NetError::Config(_) => "config",
            NetError::Transport { .. } => "transport",
            NetError::Internal(_) => "internal",
        }
    }

    /// Worth retrying on another replica.
    pub fn is_retryable(&self) -> bool {
        matches!(self, NetError::Transport { .. }) || self.status() == 503
    }
}

impl From<sieve_core::Error> for NetError {
    fn from(e: sieve_core::Error) -> Self {
        use sieve_core::Error as E;
        match e {
            E::DuplicateId(id) => NetError::Duplicate(id),
            E::Incompatible(msg) => NetError::Incompatible(msg),
            E::DimensionMismatch { .. } | E::InvalidArgument(_) | E::NonFinite | E::ZeroVector | E::Format(_) => {
                NetError::BadRequest(e.to_string())
            }
            other => NetError::Internal(other.to_string()),
        }
    }
}
