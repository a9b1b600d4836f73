//! Encode a packet carrying stream data and an ACK, then decode it again.

use std::collections::BTreeSet;

use clipstream::wire::{
    decode_ack_ranges, decode_packet, encode_ack_ranges, encode_packet, Frame, PacketHeader, StreamFrame, WireConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = WireConfig::default();
    let received: BTreeSet<u64> = (0..40).chain(42..60).chain(75..80).collect();
    let ack = encode_ack_ranges(&received, cfg.max_ack_ranges)?;
    println!(
        "ack: largest {} first run {} extra ranges {:?}",
        ack.largest_acked, ack.first_run_length, ack.ranges
    );

    let frames = vec![
        Frame::Stream(StreamFrame {
            stream_id: 3,
            offset: 4096,
            fin: false,
            data: vec![0xAB; 512],
        }),
        Frame::Ack(ack),
        Frame::MaxData { limit: 1 << 24 },
    ];
    let bytes = encode_packet(&PacketHeader::new(0xC0FFEE, 17), &frames, &cfg)?;
    println!("packet: {} bytes, header {:02x?}", bytes.len(), &bytes[..18]);

    let (header, decoded) = decode_packet(&bytes)?;
    assert_eq!(decoded, frames);
    println!("decoded packet {} with {} frames", header.packet_number, decoded.len());
    if let Frame::Ack(a) = &decoded[1] {
        assert_eq!(decode_ack_ranges(a)?, received);
        println!("ack ranges round-trip: {:?}", a.acked_ranges()?);
    }

    let oversized = Frame::Stream(StreamFrame {
        stream_id: 1,
        offset: 0,
        fin: false,
        data: vec![0; 1400],
    });
    println!(
        "oversized payload: {:?}",
        encode_packet(&PacketHeader::new(1, 1), &[oversized], &cfg).unwrap_err()
    );
    Ok(())
}
