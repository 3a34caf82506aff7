//! Byte-level wire fixtures. The hex files were generated once from the
//! encoder, then verified field-by-field against the layout in
//! docs/PROTOCOL.md and frozen; the encoder must keep producing them and an
//! independent CRC-32 (zlib) agrees on the checksums.

use blockstop::policy::StopReason;
use blockstop::wire::{
    decode_data_frame, decode_stop_frame, encode_data_frame, encode_stop_frame, DataFrame,
    StopFrame, DEFAULT_MTU_BUDGET, STOP_FRAME_LEN,
};
use blockstop::BlockId;

fn fixture_hex(name: &str) -> Vec<u8> {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    let text = std::fs::read_to_string(path).unwrap();
    let text = text.trim();
    (0..text.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&text[i..i + 2], 16).unwrap())
        .collect()
}

fn golden_data_frame() -> DataFrame {
    DataFrame {
        image_id: 0x0102_0304,
        block_id: BlockId(7),
        n_blocks: 64,
        utility_q: 0x1234,
        total_utility_q: 0x0002_8000,
        payload: vec![0xDE, 0xAD, 0xBE, 0xEF],
    }
}

#[test]
fn data_frame_encodes_to_golden_bytes() {
    let bytes = encode_data_frame(&golden_data_frame(), DEFAULT_MTU_BUDGET).unwrap();
    assert_eq!(bytes, fixture_hex("golden_data_frame.hex"));
}

#[test]
fn golden_data_frame_fields_decode_exactly() {
    let bytes = fixture_hex("golden_data_frame.hex");
    // hand-verified field offsets
    assert_eq!(&bytes[0..2], b"BK");
    assert_eq!(bytes[2], 1); // version
    assert_eq!(&bytes[3..7], &[0x01, 0x02, 0x03, 0x04]); // image_id
    assert_eq!(&bytes[7..11], &[0x00, 0x00, 0x00, 0x07]); // block_id
    assert_eq!(&bytes[11..15], &[0x00, 0x00, 0x00, 0x40]); // n_blocks = 64
    assert_eq!(&bytes[15..17], &[0x12, 0x34]); // utility_q
    assert_eq!(&bytes[17..21], &[0x00, 0x02, 0x80, 0x00]); // 2.5 in 16.16
    assert_eq!(&bytes[21..23], &[0x00, 0x04]); // payload_len
    assert_eq!(&bytes[23..27], &[0xDE, 0xAD, 0xBE, 0xEF]);
    assert_eq!(decode_data_frame(&bytes).unwrap(), golden_data_frame());
}

#[test]
fn stop_frame_encodes_to_golden_bytes() {
    let frame = StopFrame {
        image_id: 0x0102_0304,
        stop_step: 42,
        reason: StopReason::UtilityThreshold,
    };
    let bytes = encode_stop_frame(&frame);
    let golden = fixture_hex("golden_stop_frame.hex");
    assert_eq!(golden.len(), STOP_FRAME_LEN);
    assert_eq!(bytes.as_slice(), golden.as_slice());
    assert_eq!(decode_stop_frame(&golden).unwrap(), frame);
}
