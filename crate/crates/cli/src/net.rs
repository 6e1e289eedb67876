//! Protocol endpoints over a local TCP transport: a single-threaded
//! server around the enrollment database and a client that enrolls
//! simulated chips and runs verification sessions.

use std::net::{TcpListener, TcpStream};
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use aschpuf_core::puf_cell::stream;
use aschpuf_core::{
    generate_key, handle_connection, run_d_asch_powerup, run_s_asch, Environment, FlowParams,
    Key, ModelConfig, ServerDb, WireMessage,
};

use crate::experiments::{ARRAY_COLS, ARRAY_ROWS};

/// Runs the enrollment/verification server. Connections are handled
/// sequentially; enrollment writes are serialized by construction.
/// `max_connections` bounds the accept loop (useful for scripted runs).
pub fn serve(addr: &str, db_path: Option<&Path>, max_connections: Option<usize>) -> Result<()> {
    let mut db = match db_path {
        Some(p) => ServerDb::open(p).with_context(|| format!("opening database {p:?}"))?,
        None => ServerDb::in_memory(),
    };
    let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
    println!("listening on {}", listener.local_addr()?);
    use std::io::Write;
    std::io::stdout().flush().ok();

    let mut served = 0usize;
    for conn in listener.incoming() {
        let mut stream = conn?;
        if let Err(e) = handle_connection(&mut stream, &mut db) {
            eprintln!("session error: {e}");
        }
        served += 1;
        if let Some(max) = max_connections {
            if served >= max {
                break;
            }
        }
    }
    println!("served {served} connections, {} chips enrolled", db.len());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientMode {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Copy)]
pub struct ClientOutcome {
    pub chips: usize,
    pub sessions: usize,
    pub accepts: usize,
}

fn expect_verdict(stream: &mut TcpStream) -> Result<(bool, String)> {
    match WireMessage::read_from(stream)? {
        Some(WireMessage::Verdict { accept, reason }) => Ok((accept, reason)),
        Some(other) => bail!("expected a verdict, got {other:?}"),
        None => bail!("server closed the connection"),
    }
}

fn random_env(rng: &mut impl Rng) -> Environment {
    Environment {
        vdd: rng.gen_range(0.7..=1.4),
        temperature: rng.gen_range(-45.0..=125.0),
    }
}

fn tampered(key: &Key) -> Key {
    let mut bits: Vec<bool> = key.iter().collect();
    bits[0] = !bits[0];
    Key::from_bits(bits, "tampered")
}

/// Enrolls `n_chips` simulated chips and runs `sessions_per_chip`
/// verification sessions each at randomized field conditions.
pub fn run_client(
    addr: &str,
    cfg: &ModelConfig,
    mode: ClientMode,
    n_chips: usize,
    sessions_per_chip: usize,
    skew_mv: f64,
    tamper: bool,
    run_seed: u64,
) -> Result<ClientOutcome> {
    let mut stream = TcpStream::connect(addr).with_context(|| format!("connecting {addr}"))?;
    let params = FlowParams::default();
    let mut env_rng = ChaCha8Rng::seed_from_u64(stream::mix(run_seed, 0xC11E));

    let mut sessions = 0usize;
    let mut accepts = 0usize;
    for id in crate::experiments::chip_ids(n_chips) {
        let chip = aschpuf_core::sample_chip(cfg, &id, ARRAY_ROWS, ARRAY_COLS);
        let enroll_seed = stream::mix(run_seed, 0xE201);

        let enrolled_map = match mode {
            ClientMode::Static => {
                let run = run_s_asch(&chip, cfg.nominal_env, skew_mv, &params, enroll_seed)?;
                WireMessage::EnrollStatic {
                    chip_id: id.clone(),
                    key: run.golden_key.clone(),
                    map: run.map.clone(),
                }
                .write_to(&mut stream)?;
                Some(run.map)
            }
            ClientMode::Dynamic => {
                let run = run_s_asch(&chip, cfg.nominal_env, skew_mv, &params, enroll_seed)?;
                WireMessage::EnrollDynamic {
                    chip_id: id.clone(),
                    orig_plane: run.golden_orig.clone(),
                    healed_plane: run.golden_heal.clone(),
                }
                .write_to(&mut stream)?;
                None
            }
        };
        let (accept, reason) = expect_verdict(&mut stream)?;
        if !accept {
            bail!("enrollment of {id} rejected: {reason}");
        }

        for s in 0..sessions_per_chip {
            let env = random_env(&mut env_rng);
            let session_seed = stream::label(run_seed, 0x5e55, s as u64);
            let key = match mode {
                ClientMode::Dynamic => {
                    let powerup = run_d_asch_powerup(&chip, env, skew_mv, &params, session_seed)?;
                    WireMessage::SessionMap { chip_id: id.clone(), map: powerup.map.clone() }
                        .write_to(&mut stream)?;
                    powerup.key
                }
                ClientMode::Static => {
                    let map = enrolled_map.as_ref().expect("static enrollment kept its map");
                    generate_key(&chip, map, env, map.unmasked_count() as u32, session_seed)?
                }
            };
            let proof = if tamper { tampered(&key) } else { key };
            WireMessage::KeyProof { chip_id: id.clone(), key: proof }.write_to(&mut stream)?;
            let (accept, _reason) = expect_verdict(&mut stream)?;
            sessions += 1;
            if accept {
                accepts += 1;
            }
        }
    }
    Ok(ClientOutcome { chips: n_chips, sessions, accepts })
}
