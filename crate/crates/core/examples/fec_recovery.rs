//! Protect one P-frame with parity shards and recover it after losses.

use clipstream::fec::{fec_decode, fec_encode, parity_policy, FecMode, FecParams};
use clipstream::session::frame_payload;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let payload = frame_payload(42, 22_030);
    let k = FecParams::data_shards_for(payload.len(), 1200);
    let m = parity_policy(k, 0.0, FecMode::Static);
    let params = FecParams::new(k, m, 1200)?;
    println!("k = {k}, m = {m}, {} bytes on the wire", params.coded_len());
    println!(
        "adaptive m at 1.28% loss: {}",
        parity_policy(k, 0.0128, FecMode::Adaptive)
    );

    let mut set = fec_encode(&payload, &params)?;
    for i in [0, 7, 19] {
        set.shards[i] = None;
    }
    assert_eq!(fec_decode(&set, &params)?, payload);
    println!("3 shards erased: recovered");

    set.shards[3] = None;
    println!("4 shards erased: {}", fec_decode(&set, &params).unwrap_err());
    Ok(())
}
