//! One reliable and one unreliable stream over the same lossy path. The
//! reliable stream arrives byte-exact; the unreliable one arrives on time
//! with zero-filled holes where packets were lost.

use std::collections::BTreeMap;
use std::time::Duration;

use clipstream::netem::{next_event_time, DuplexLink, LinkConfig};
use clipstream::transport::{Connection, Side, StreamClass, StreamId, TransportConfig};
use clipstream::SimTime;

const LEN: usize = 2_000_000;

fn pattern(len: usize, salt: u8) -> Vec<u8> {
    (0..len)
        .map(|i| (i as u8).wrapping_mul(31) ^ salt ^ (i >> 10) as u8)
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut link = DuplexLink::new(LinkConfig {
        loss_rate: 0.02,
        seed: 9,
        ..LinkConfig::default()
    })?;
    let mut client = Connection::new(Side::Client, TransportConfig::default());
    let mut server = Connection::new(Side::Server, TransportConfig::default());
    let sources = [pattern(LEN, 0x11), pattern(LEN, 0x77)];
    let mut ids: Vec<StreamId> = Vec::new();
    let mut written = [0usize; 2];
    let mut received: BTreeMap<StreamId, (Vec<u8>, usize, bool)> = BTreeMap::new();
    let mut now = SimTime::ZERO;

    loop {
        for (d, _) in link.forward.poll(now) {
            client.on_datagram(&d, now);
        }
        for (d, _) in link.reverse.poll(now) {
            server.on_datagram(&d, now);
        }
        for conn in [&mut client, &mut server] {
            if conn.next_timeout().is_some_and(|t| t <= now) {
                conn.on_timeout(now);
            }
        }
        if server.is_established() && ids.is_empty() {
            ids.push(server.open_stream(StreamClass::Reliable)?);
            ids.push(server.open_stream(StreamClass::Unreliable)?);
        }
        for (i, &id) in ids.iter().enumerate() {
            if written[i] < LEN {
                written[i] += server.stream_write(id, &sources[i][written[i]..], true)?;
            }
        }
        let open: Vec<StreamId> = client.stream_ids().collect();
        for id in open {
            let entry = received.entry(id).or_default();
            let r = client.stream_read(id, usize::MAX, now)?;
            entry.0.extend_from_slice(&r.data);
            entry.1 += r.zero_filled.iter().map(|g| (g.end - g.start) as usize).sum::<usize>();
            entry.2 |= r.fin;
        }
        for d in server.poll_transmit(now) {
            link.forward.push(d, now);
        }
        for d in client.poll_transmit(now) {
            link.reverse.push(d, now);
        }
        if received.len() == 2 && received.values().all(|r| r.2) {
            break;
        }
        match next_event_time(
            [&link.forward, &link.reverse],
            [client.next_timeout(), server.next_timeout()],
        ) {
            Some(t) => now = t.max(now + Duration::from_micros(1)),
            None => break,
        }
    }

    for (id, (data, zeros, _)) in &received {
        let i = ids.iter().position(|x| x == id).unwrap();
        let diff = data.iter().zip(&sources[i]).filter(|(a, b)| a != b).count();
        println!(
            "{:?} {:?}: {} bytes, {} zero-filled, {} bytes differ",
            id,
            id.class(),
            data.len(),
            zeros,
            diff
        );
    }
    let st = server.stats();
    println!(
        "finished at {:.3} s: {} packets sent, {} lost, {} bytes retransmitted, {} unreliable bytes lost",
        now.as_secs_f64(),
        st.packets_sent,
        st.packets_lost,
        st.stream_bytes_retransmitted,
        st.unreliable_bytes_lost
    );
    Ok(())
}
