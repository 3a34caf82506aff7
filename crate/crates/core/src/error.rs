use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("image dimensions {width}x{height} are not multiples of {block_width}x{block_height} blocks")]
    Dimension {
        width: u32,
        height: u32,
        block_width: u32,
        block_height: u32,
    },

    #[error("block id {id} out of range (grid has {n_blocks} blocks)")]
    BlockOutOfRange { id: u32, n_blocks: u32 },

    #[error("no payload recorded for received block {id}")]
    MissingPayload { id: u32 },

    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(u8),

    #[error("pixel buffer length {got} does not match {want} (width*height*channels)")]
    PixelLength { got: usize, want: usize },

    #[error("utility map has {got} entries, grid expects {want}")]
    UtilityLength { got: usize, want: usize },

    #[error("no full-image detection; image skipped for utility supervision")]
    NoFullImageDetection,

    #[error("malformed {what}: {detail}")]
    Parse { what: &'static str, detail: String },

    #[error("scene spec invalid: {0}")]
    SceneSpec(String),

    #[error("frame payload of {got} bytes exceeds budget of {budget}")]
    PayloadTooLarge { got: usize, budget: usize },

    #[error("socket run aborted: {0}")]
    SocketAbort(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
