//! Frames: a 4-byte big-endian length followed by that many bytes of JSON.

use thiserror::Error;

use super::message::AclMessage;

/// Upper bound on a frame body; larger prefixes are treated as corruption.
pub const MAX_FRAME: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("content kind {kind} cannot be sent as {performative}")]
    Inconsistent { performative: String, kind: String },
    #[error("frame has an empty body")]
    EmptyFrame,
    #[error("frame length {0} exceeds the limit")]
    Oversized(usize),
    #[error("malformed message: {0}")]
    Malformed(String),
}

#[derive(Debug)]
pub enum Decoded {
    /// Not enough bytes yet for a whole frame.
    NeedMore,
    /// A message and the number of bytes it consumed.
    Message(Box<AclMessage>, usize),
}

fn check(msg: &AclMessage) -> Result<(), CodecError> {
    if msg.is_consistent() {
        Ok(())
    } else {
        Err(CodecError::Inconsistent {
            performative: msg.performative.to_string(),
            kind: msg.content.kind().to_string(),
        })
    }
}

pub fn encode_message(msg: &AclMessage) -> Result<Vec<u8>, CodecError> {
    check(msg)?;
    let body = serde_json::to_vec(msg).map_err(|e| CodecError::Malformed(e.to_string()))?;
    if body.len() > MAX_FRAME {
        return Err(CodecError::Oversized(body.len()));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn decode_message(bytes: &[u8]) -> Result<Decoded, CodecError> {
    let Some(prefix) = bytes.get(..4) else {
        return Ok(Decoded::NeedMore);
    };
    let len = u32::from_be_bytes(prefix.try_into().expect("four bytes")) as usize;
    if len == 0 {
        return Err(CodecError::EmptyFrame);
    }
    if len > MAX_FRAME {
        return Err(CodecError::Oversized(len));
    }
    let Some(body) = bytes.get(4..4 + len) else {
        return Ok(Decoded::NeedMore);
    };
    let msg: AclMessage = serde_json::from_slice(body).map_err(|e| CodecError::Malformed(e.to_string()))?;
    check(&msg)?;
    Ok(Decoded::Message(Box::new(msg), 4 + len))
}

/// Accumulates bytes from a stream and yields complete messages.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, if any. Errors are fatal for the stream.
    pub fn next_message(&mut self) -> Result<Option<AclMessage>, CodecError> {
        match decode_message(&self.buf)? {
            Decoded::NeedMore => Ok(None),
            Decoded::Message(msg, used) => {
                self.buf.drain(..used);
                Ok(Some(*msg))
            }
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::money::Money;
    use crate::protocol::message::*;
    use crate::rfql::RfqRequest;
    use crate::time::Timestamp;

    fn cfp() -> AclMessage {
        let request = RfqRequest::new("u0", Money::from_units(70), 16, 3600, Timestamp::from_secs(1_700_086_400));
        AclMessage {
            performative: Performative::CallForProposals,
            sender: "alice".into(),
            receiver: "atlas1".into(),
            conversation_id: new_conversation_id("A1", 0),
            in_reply_to: None,
            message_id: "alice#1".into(),
            ontology: ONTOLOGY.into(),
            sent_at: Timestamp::from_secs(1_700_000_000),
            content: Content::Rfq(RfqContent {
                auction_id: "A1".into(),
                unit_index: 0,
                round: 1,
                request,
                offer_expires_at: Timestamp::from_secs(1_700_000_100),
            }),
        }
    }

    #[test]
    fn round_trip_and_length_prefix() {
        let msg = cfp();
        let bytes = encode_message(&msg).unwrap();
        let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        assert_eq!(len, bytes.len() - 4);
        match decode_message(&bytes).unwrap() {
            Decoded::Message(back, used) => {
                assert_eq!(*back, msg);
                assert_eq!(used, bytes.len());
            }
            Decoded::NeedMore => panic!("complete frame"),
        }
    }

    #[test]
    fn cfp_wire_shape() {
        let bytes = encode_message(&cfp()).unwrap();
        let body: serde_json::Value = serde_json::from_slice(&bytes[4..]).unwrap();
        assert_eq!(body["performative"], "cfp");
        assert_eq!(body["content"]["kind"], "rfq");
        assert_eq!(body["content"]["request"]["TotalCores"], 16);
        assert_eq!(body["content"]["request"]["CPUHourCost"], "70.00");
        for field in ["sender", "receiver", "conversation_id", "in_reply_to", "message_id", "ontology", "sent_at"] {
            assert!(body.get(field).is_some(), "{field}");
        }
    }

    #[test]
    fn receipt_keeps_its_content_tag() {
        let mut msg = cfp();
        msg.performative = Performative::Agree;
        msg.content = Content::Receipt(ReceiptContent {
            tx_id: "tx-000002".into(),
            kind: EntryKind::Settlement,
            reservation_id: "r1".into(),
            amount: Money::from_units(12),
        });
        let bytes = encode_message(&msg).unwrap();
        let body: serde_json::Value = serde_json::from_slice(&bytes[4..]).unwrap();
        assert_eq!(body["content"]["kind"], "receipt");
        assert_eq!(body["content"]["entry_kind"], "settlement");
        match decode_message(&bytes).unwrap() {
            Decoded::Message(back, _) => assert_eq!(*back, msg),
            Decoded::NeedMore => panic!("complete frame"),
        }
    }

    #[test]
    fn unknown_performative_is_rejected() {
        let bytes = encode_message(&cfp()).unwrap();
        let text = String::from_utf8(bytes[4..].to_vec()).unwrap().replace("\"cfp\"", "\"bid\"");
        let mut frame = (text.len() as u32).to_be_bytes().to_vec();
        frame.extend_from_slice(text.as_bytes());
        assert!(matches!(decode_message(&frame), Err(CodecError::Malformed(_))));
    }

    #[test]
    fn empty_frame_is_rejected() {
        assert!(matches!(decode_message(&[0, 0, 0, 0]), Err(CodecError::EmptyFrame)));
    }

    #[test]
    fn truncated_frame_needs_more() {
        let bytes = encode_message(&cfp()).unwrap();
        assert!(matches!(decode_message(&bytes[..2]).unwrap(), Decoded::NeedMore));
        assert!(matches!(decode_message(&bytes[..bytes.len() - 1]).unwrap(), Decoded::NeedMore));
    }

    #[test]
    fn inconsistent_content_is_an_encode_error() {
        let mut msg = cfp();
        msg.performative = Performative::Propose;
        assert!(matches!(encode_message(&msg), Err(CodecError::Inconsistent { .. })));
    }

    #[test]
    fn two_frames_decode_in_order() {
        let first = cfp();
        let mut second = cfp();
        second.message_id = "alice#2".into();
        second.performative = Performative::Cancel;
        second.content = Content::Cancel(CancelContent { reservation_id: Some("r1".into()), reason: "user".into() });
        let mut stream = encode_message(&first).unwrap();
        stream.extend(encode_message(&second).unwrap());
        let mut dec = FrameDecoder::new();
        for chunk in stream.chunks(7) {
            dec.push(chunk);
        }
        assert_eq!(dec.next_message().unwrap(), Some(first));
        assert_eq!(dec.next_message().unwrap(), Some(second));
        assert_eq!(dec.next_message().unwrap(), None);
        assert_eq!(dec.buffered(), 0);
    }

    #[test]
    fn every_performative_string_mutation_is_rejected() {
        let bytes = encode_message(&cfp()).unwrap();
        let text = String::from_utf8(bytes[4..].to_vec()).unwrap();
        for mutated in ["cfP", "cf", "cfpp", "Cfp", "propose", ""] {
            let t = text.replacen("\"cfp\"", &format!("\"{mutated}\""), 1);
            let mut frame = (t.len() as u32).to_be_bytes().to_vec();
            frame.extend_from_slice(t.as_bytes());
            assert!(decode_message(&frame).is_err(), "{mutated}");
        }
    }
}
