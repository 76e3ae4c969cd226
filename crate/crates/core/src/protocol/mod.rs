//! Agent messages, the negotiation content ontology and the wire codec.

mod codec;
mod message;

pub use codec::{decode_message, encode_message, CodecError, Decoded, FrameDecoder, MAX_FRAME};
pub use message::*;
