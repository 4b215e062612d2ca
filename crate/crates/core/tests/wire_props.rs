use std::time::{Duration, Instant};

use fedgnn::transport::chunk::{chunk_join, chunk_split, Chunk, Reassembler};
use fedgnn::transport::wire::{
    decode, encode, encode_with, AlgorithmTag, Body, EndReason, ExperimentEnd, FederationMessage, GlobalModel, Join,
    JoinAck, LocalUpdateMsg, ModelPayload, RoundAbort, WireError,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CHUNK: usize = 4096;

fn ident() -> impl Strategy<Value = String> {
    "[a-z0-9][a-z0-9_-]{0,15}"
}

fn payload() -> impl Strategy<Value = ModelPayload> {
    (any::<u8>(), any::<bool>(), 0usize..6000).prop_flat_map(|(scheme, scaffold, len)| {
        let params = prop::collection::vec(any::<f32>(), len);
        let control = if scaffold {
            prop::collection::vec(any::<f32>(), len).prop_map(Some).boxed()
        } else {
            Just(None).boxed()
        };
        (params, control).prop_map(move |(params, control)| ModelPayload {
            feature_scheme: scheme,
            algorithm: if scaffold { AlgorithmTag::Scaffold } else { AlgorithmTag::FedAvg },
            params,
            control,
        })
    })
}

fn body() -> impl Strategy<Value = Body> {
    prop_oneof![
        (any::<u64>(), any::<u32>(), any::<u8>(), any::<u32>()).prop_map(|(nonce, n_samples, feature_scheme, param_count)| {
            Body::Join(Join { nonce, n_samples, feature_scheme, param_count })
        }),
        (ident(), any::<bool>(), any::<u64>(), ".{0,40}")
            .prop_map(|(client, accepted, session, reason)| Body::JoinAck(JoinAck { client, accepted, session, reason })),
        (any::<u64>(), any::<u8>(), any::<u64>(), any::<f64>(), any::<u32>(), prop::collection::vec(ident(), 0..6), payload())
            .prop_map(|(session, attempt, round_seed, local_lr, local_steps, participants, model)| {
                Body::GlobalModel(GlobalModel { session, attempt, round_seed, local_lr, local_steps, participants, model })
            }),
        (any::<u64>(), any::<u8>(), any::<u32>(), any::<u32>(), payload()).prop_map(
            |(session, attempt, n_samples, local_steps, model)| {
                Body::LocalUpdate(LocalUpdateMsg { session, attempt, n_samples, local_steps, model })
            }
        ),
        (any::<u8>(), ".{0,60}").prop_map(|(attempt, reason)| Body::RoundAbort(RoundAbort { attempt, reason })),
        (0u8..3, any::<u32>()).prop_map(|(r, best_round)| {
            let reason = [EndReason::Completed, EndReason::EarlyStopped, EndReason::Aborted][r as usize];
            Body::ExperimentEnd(ExperimentEnd { reason, best_round })
        }),
    ]
}

fn message() -> impl Strategy<Value = FederationMessage> {
    (ident(), any::<u32>(), ident(), body()).prop_map(|(experiment, round, sender, body)| FederationMessage {
        experiment,
        round,
        sender,
        body,
    })
}

/// Send every chunk through its frame encoding in shuffled order.
fn transmit(bytes: &[u8], seed: u64) -> Vec<Chunk> {
    let mut frames: Vec<Vec<u8>> = chunk_split(bytes, CHUNK).unwrap().iter().map(Chunk::encode).collect();
    frames.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    frames.iter().map(|f| Chunk::decode(f).unwrap()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn chunked_round_trip_is_bitwise(msg in message(), compress in any::<bool>(), seed in any::<u64>()) {
        let bytes = encode_with(&msg, compress);
        let chunks = transmit(&bytes, seed);
        prop_assert!(chunks.iter().all(|c| c.bytes.len() <= CHUNK));
        let joined = chunk_join(&chunks).unwrap();
        prop_assert_eq!(&joined, &bytes);
        let decoded = decode(&joined).unwrap();
        // re-encoding compares floats (NaN payloads included) bit for bit
        prop_assert_eq!(encode(&decoded), encode(&msg));
        prop_assert_eq!(decoded.kind(), msg.kind());

        let mut reassembler = Reassembler::new();
        let now = Instant::now();
        let mut out = None;
        for c in chunks {
            if let Some(done) = reassembler.push(c, now).unwrap() {
                out = Some(done);
            }
        }
        prop_assert_eq!(out.as_deref(), Some(&bytes[..]));
        prop_assert_eq!(reassembler.pending(), 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn flipped_body_byte_is_a_checksum_error(msg in message(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = encode(&msg);
        let header = bytes.len() - body_length(&msg);
        prop_assume!(bytes.len() > header);
        let at = header + pos.index(bytes.len() - header);
        bytes[at] ^= 1 << bit;
        let err = decode(&bytes).unwrap_err();
        prop_assert!(matches!(err, WireError::Checksum { .. }), "{:?}", err);
        prop_assert_eq!(err.code(), 14);
    }

    #[test]
    fn truncation_is_reported(msg in message(), cut in any::<prop::sample::Index>()) {
        let bytes = encode(&msg);
        let keep = cut.index(bytes.len());
        let err = decode(&bytes[..keep]).unwrap_err();
        prop_assert!(matches!(err, WireError::Truncated { .. } | WireError::BadMagic), "{:?}", err);
    }

    #[test]
    fn missing_chunks_are_named(msg in message(), seed in any::<u64>(), drop in any::<prop::sample::Index>()) {
        let bytes = encode(&msg);
        let mut chunks = transmit(&bytes, seed);
        prop_assume!(chunks.len() > 1);
        let gone = chunks.remove(drop.index(chunks.len()));
        match chunk_join(&chunks) {
            Err(WireError::MissingChunks { missing, .. }) => prop_assert_eq!(missing, vec![gone.index]),
            other => prop_assert!(false, "unexpected {:?}", other),
        }
    }
}

/// Length of the body section of the uncompressed encoding.
fn body_length(msg: &FederationMessage) -> usize {
    let bytes = encode(msg);
    // magic 4, version 2, kind 1, flags 1, round 4, then two u16-prefixed strings
    let mut at = 12;
    for _ in 0..2 {
        let len = u16::from_le_bytes([bytes[at], bytes[at + 1]]) as usize;
        at += 2 + len;
    }
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
}

fn sample_message() -> FederationMessage {
    FederationMessage {
        experiment: "exp".into(),
        round: 3,
        sender: "server".into(),
        body: Body::GlobalModel(GlobalModel {
            session: 9,
            attempt: 0,
            round_seed: 17,
            local_lr: 0.003,
            local_steps: 0,
            participants: vec!["a".into(), "b".into()],
            model: ModelPayload::from_f64(1, AlgorithmTag::FedAvg, &[0.5; 3000], None),
        }),
    }
}

#[test]
fn header_corruptions_have_distinct_errors() {
    let good = encode(&sample_message());
    let mut magic = good.clone();
    magic[0] = b'X';
    assert_eq!(decode(&magic).unwrap_err(), WireError::BadMagic);
    let mut version = good.clone();
    version[4] = 99;
    assert_eq!(decode(&version).unwrap_err(), WireError::UnsupportedVersion(99));
    let mut kind = good.clone();
    kind[6] = 42;
    assert_eq!(decode(&kind).unwrap_err(), WireError::UnknownKind(42));
    let codes: Vec<u16> = [WireError::BadMagic, WireError::UnsupportedVersion(2), WireError::UnknownKind(0)]
        .iter()
        .map(WireError::code)
        .collect();
    assert_eq!(codes, vec![10, 11, 12]);
}

#[test]
fn stale_partial_messages_expire() {
    let bytes = encode(&sample_message());
    let mut chunks = chunk_split(&bytes, CHUNK).unwrap();
    assert!(chunks.len() > 1);
    chunks.pop();
    let mut r = Reassembler::new();
    let t0 = Instant::now();
    for c in chunks {
        assert!(r.push(c, t0).unwrap().is_none());
    }
    assert!(r.expire(t0 + Duration::from_secs(1), Duration::from_secs(30)).is_empty());
    let errors = r.expire(t0 + Duration::from_secs(31), Duration::from_secs(30));
    assert!(matches!(errors.as_slice(), [WireError::MissingChunks { .. }]));
    assert_eq!(errors[0].code(), 20);
    assert_eq!(r.pending(), 0);
}
