use std::sync::Arc;
use std::time::Duration;

use headsteer_client::{ClientError, SteerClient};
use headsteer_core::profile::{ProfileEntry, SteerMode, SteeringProfile};
use headsteer_core::steer::{apply_profile, HeadActivation};
use headsteer_core::wire::{self, code, Message, SteerFrame, ANY_PROFILE, PROTOCOL_VERSION};
use headsteer_core::HeadId;
use headsteer_service::{bind, serve, After, ServiceError, Session, SteeringService};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

const L: u16 = 4;
const H: u16 = 8;

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 0.1 {
            return v.iter().map(|a| (a / n) as f32).collect();
        }
    }
}

/// Random valid profile steering `k` distinct heads of the 4x8 grid.
fn random_profile(seed: u64, d: u32, k: usize, mode: SteerMode) -> SteeringProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = SteeringProfile::empty(d, mode);
    p.num_layers = L;
    p.num_heads = H;
    p.fraction = k as f64 / (L as usize * H as usize) as f64;
    p.alpha = if mode == SteerMode::Additive { 0.75 } else { 1.0 };
    let mut heads: Vec<HeadId> = (0..L).flat_map(|l| (0..H).map(move |h| HeadId::new(l, h))).collect();
    for i in 0..k {
        let j = rng.random_range(i..heads.len());
        heads.swap(i, j);
    }
    p.entries = heads[..k].iter().map(|&head| ProfileEntry { head, vector: unit(&mut rng, d as usize) }).collect();
    assert!(p.violations().is_empty(), "{:?}", p.violations());
    p
}

/// Random frame over profiled and unprofiled heads with varied magnitudes.
fn random_frame(rng: &mut ChaCha8Rng, d: usize, only: Option<&SteeringProfile>) -> SteerFrame {
    let n = rng.random_range(1..12);
    let entries = (0..n)
        .map(|_| {
            let head = match only {
                Some(p) => p.entries[rng.random_range(0..p.entries.len())].head,
                None => HeadId::new(rng.random_range(0..L), rng.random_range(0..H)),
            };
            let scale = 10f32.powi(rng.random_range(-3..4));
            HeadActivation { head, x: (0..d).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect() }
        })
        .collect();
    SteerFrame { request_id: rng.random(), entries }
}

fn bits(frame: &[HeadActivation]) -> Vec<(HeadId, Vec<u32>)> {
    frame.iter().map(|e| (e.head, e.x.iter().map(|v| v.to_bits()).collect())).collect()
}

struct Running {
    addr: std::net::SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<Result<(), ServiceError>>,
}

impl Running {
    async fn stop(mut self) {
        let _ = self.stop.take().unwrap().send(());
        tokio::time::timeout(Duration::from_secs(5), self.task).await.unwrap().unwrap().unwrap();
    }
}

async fn start(profile: SteeringProfile, strict: bool) -> Running {
    let service = Arc::new(SteeringService::new(profile, strict).unwrap());
    let listener = bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = oneshot::channel();
    let task = tokio::spawn(serve(listener, service, async {
        let _ = rx.await;
    }));
    Running { addr, stop: Some(tx), task }
}

async fn raw_exchange(addr: std::net::SocketAddr, bytes: &[u8]) -> Vec<Message> {
    let mut s = TcpStream::connect(addr).await.unwrap();
    s.write_all(bytes).await.unwrap();
    let mut out = Vec::new();
    tokio::time::timeout(Duration::from_secs(5), s.read_to_end(&mut out)).await.unwrap().unwrap();
    let mut msgs = Vec::new();
    let mut at = 0;
    while at < out.len() {
        let (_, len) = wire::decode_header(&out[at..]).unwrap();
        let end = at + wire::FRAME_HEADER_LEN + len as usize;
        msgs.push(wire::decode_message(&out[at..end]).unwrap());
        at = end;
    }
    msgs
}

fn hello(digest: [u8; 32]) -> Vec<u8> {
    wire::encode_message(&Message::Hello { version: PROTOCOL_VERSION, profile_digest: digest }).unwrap()
}

fn error_code(msg: &Message) -> u16 {
    match msg {
        Message::Error { code, .. } => *code,
        other => panic!("expected ERROR, got {other:?}"),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn served_results_match_in_process_bitwise() {
    for (seed, mode) in [(1, SteerMode::Rotate), (2, SteerMode::Additive)] {
        let profile = random_profile(seed, 32, 10, mode);
        let digest = profile.digest().unwrap();
        let running = start(profile.clone(), false).await;
        let mut client = SteerClient::connect(running.addr, Some(digest)).await.unwrap();
        assert_eq!(client.session().head_dim, 32);
        assert_eq!(client.session().head_count, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for _ in 0..500 {
            let frame = random_frame(&mut rng, 32, None);
            let served = client.steer_frame(&frame).await.unwrap();
            assert_eq!(served.request_id, frame.request_id);
            let local = apply_profile(&frame.entries, &profile).unwrap();
            assert_eq!(bits(&served.entries), bits(&local));
        }
        running.stop().await;
    }
}

#[tokio::test]
async fn hello_ack_reports_dim_and_head_count() {
    let service = SteeringService::new(random_profile(3, 16, 5, SteerMode::Rotate), true).unwrap();
    let mut s = Session::default();
    let (reply, after) = service.handle(&mut s, Message::Hello { version: PROTOCOL_VERSION, profile_digest: ANY_PROFILE });
    assert_eq!(reply, Message::HelloAck { head_dim: 16, head_count: 5 });
    assert_eq!(after, After::Continue);
    assert_eq!(s, Session::Ready);
}

#[tokio::test]
async fn handshake_errors_close_the_connection() {
    let profile = random_profile(4, 8, 3, SteerMode::Rotate);
    let running = start(profile.clone(), true).await;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let req = wire::encode_message(&Message::SteerReq(random_frame(&mut rng, 8, Some(&profile)))).unwrap();
    let msgs = raw_exchange(running.addr, &req).await;
    assert_eq!(msgs.len(), 1);
    assert_eq!(error_code(&msgs[0]), code::HANDSHAKE_REQUIRED);

    let bad_version = wire::encode_message(&Message::Hello { version: 9, profile_digest: ANY_PROFILE }).unwrap();
    let msgs = raw_exchange(running.addr, &bad_version).await;
    assert_eq!(error_code(&msgs[0]), code::UNSUPPORTED_VERSION);

    let msgs = raw_exchange(running.addr, &hello([7; 32])).await;
    assert_eq!(error_code(&msgs[0]), code::PROFILE_MISMATCH);

    // A second HELLO after the handshake is out of sequence.
    let mut twice = hello(ANY_PROFILE);
    twice.extend(hello(ANY_PROFILE));
    let msgs = raw_exchange(running.addr, &twice).await;
    assert!(matches!(msgs[0], Message::HelloAck { .. }));
    assert_eq!(error_code(&msgs[1]), code::UNEXPECTED_MESSAGE);

    match SteerClient::connect(running.addr, Some([1; 32])).await {
        Err(ClientError::Server { code: c, .. }) => assert_eq!(c, code::PROFILE_MISMATCH),
        other => panic!("expected profile mismatch, got {:?}", other.map(|_| ())),
    }
    running.stop().await;
}

#[tokio::test]
async fn strict_mode_rejects_unknown_heads_and_keeps_the_stream() {
    let profile = random_profile(5, 8, 2, SteerMode::Rotate);
    let stranger = (0..L)
        .flat_map(|l| (0..H).map(move |h| HeadId::new(l, h)))
        .find(|h| profile.entry(*h).is_none())
        .unwrap();
    let running = start(profile.clone(), true).await;
    let mut client = SteerClient::connect(running.addr, None).await.unwrap();
    let unknown = vec![HeadActivation { head: stranger, x: vec![1.0; 8] }];
    match client.steer(unknown).await {
        Err(ClientError::Server { code: c, .. }) => assert_eq!(c, code::UNKNOWN_HEAD),
        other => panic!("expected unknown head, got {other:?}"),
    }
    let known = vec![HeadActivation { head: profile.entries[0].head, x: vec![1.0; 8] }];
    let out = client.steer(known.clone()).await.unwrap();
    assert_eq!(bits(&out), bits(&apply_profile(&known, &profile).unwrap()));
    running.stop().await;
}

#[tokio::test]
async fn permissive_mode_echoes_unknown_heads() {
    let profile = random_profile(6, 8, 2, SteerMode::Rotate);
    let running = start(profile.clone(), false).await;
    let mut client = SteerClient::connect(running.addr, None).await.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let frame = random_frame(&mut rng, 8, None);
        let out = client.steer_frame(&frame).await.unwrap();
        for (a, b) in frame.entries.iter().zip(&out.entries) {
            assert_eq!(a.head, b.head);
            if profile.entry(a.head).is_none() {
                assert_eq!(bits(std::slice::from_ref(a)), bits(std::slice::from_ref(b)));
            }
        }
    }
    running.stop().await;
}

#[tokio::test]
async fn empty_profile_in_permissive_mode_echoes_frames() {
    let mut profile = SteeringProfile::empty(8, SteerMode::Rotate);
    profile.num_layers = L;
    profile.num_heads = H;
    let running = start(profile, false).await;
    let mut client = SteerClient::connect(running.addr, None).await.unwrap();
    assert_eq!(client.session().head_count, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let frame = random_frame(&mut rng, 8, None);
        assert_eq!(client.steer_frame(&frame).await.unwrap(), frame);
    }
    running.stop().await;
}

#[tokio::test]
async fn dimension_mismatch_is_code_3() {
    let profile = random_profile(8, 8, 2, SteerMode::Rotate);
    let running = start(profile.clone(), true).await;
    let mut client = SteerClient::connect(running.addr, None).await.unwrap();
    let wrong = vec![HeadActivation { head: profile.entries[0].head, x: vec![1.0; 9] }];
    match client.steer(wrong).await {
        Err(ClientError::Server { code: c, .. }) => assert_eq!(c, code::DIMENSION_MISMATCH),
        other => panic!("expected dimension mismatch, got {other:?}"),
    }
    running.stop().await;
}

#[tokio::test]
async fn malformed_frames_get_code_4_with_offset_then_close() {
    let running = start(random_profile(9, 8, 2, SteerMode::Rotate), true).await;
    let mut bytes = hello(ANY_PROFILE);
    // STEER_REQ declaring k = 2 but carrying one 8-dim entry.
    let mut payload = Vec::new();
    payload.extend_from_slice(&5u64.to_le_bytes());
    payload.extend_from_slice(&2u32.to_le_bytes());
    payload.extend_from_slice(&[0; 4]);
    payload.extend_from_slice(&[0; 32]);
    bytes.extend_from_slice(&wire::MAGIC.to_le_bytes());
    bytes.push(wire::TYPE_STEER_REQ);
    bytes.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&payload);
    let msgs = raw_exchange(running.addr, &bytes).await;
    assert_eq!(msgs.len(), 2);
    match &msgs[1] {
        Message::Error { code: c, message } => {
            assert_eq!(*c, code::MALFORMED_FRAME);
            assert!(message.contains("offset"), "{message}");
        }
        other => panic!("{other:?}"),
    }

    let msgs = raw_exchange(running.addr, b"GET / HTTP/1.1\r\n\r\n").await;
    assert_eq!(error_code(&msgs[0]), code::MALFORMED_FRAME);
    running.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn errors_on_one_connection_do_not_disturb_another() {
    let profile = random_profile(10, 8, 4, SteerMode::Rotate);
    let running = start(profile.clone(), false).await;
    let mut good = SteerClient::connect(running.addr, None).await.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..20 {
        if i % 5 == 0 {
            let msgs = raw_exchange(running.addr, &[0xAB; 40]).await;
            assert_eq!(error_code(&msgs[0]), code::MALFORMED_FRAME);
        }
        let frame = random_frame(&mut rng, 8, None);
        let out = good.steer_frame(&frame).await.unwrap();
        assert_eq!(bits(&out.entries), bits(&apply_profile(&frame.entries, &profile).unwrap()));
    }
    running.stop().await;
}

#[tokio::test]
async fn request_ids_are_echoed_in_order() {
    let profile = random_profile(11, 4, 3, SteerMode::Rotate);
    let service = SteeringService::new(profile.clone(), false).unwrap();
    let mut session = Session::Ready;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10_000 {
        let frame = random_frame(&mut rng, 4, None);
        match service.handle(&mut session, Message::SteerReq(frame.clone())) {
            (Message::SteerResp(resp), After::Continue) => {
                assert_eq!(resp.request_id, frame.request_id);
                assert_eq!(resp.entries.len(), frame.entries.len());
            }
            other => panic!("{other:?}"),
        }
    }

    // Pipelined requests on one socket come back in request order.
    let running = start(profile, false).await;
    let mut bytes = hello(ANY_PROFILE);
    let ids: Vec<u64> = (0..200).map(|_| rng.random()).collect();
    for &id in &ids {
        let mut f = random_frame(&mut rng, 4, None);
        f.request_id = id;
        bytes.extend(wire::encode_message(&Message::SteerReq(f)).unwrap());
    }
    bytes.extend(hello(ANY_PROFILE)); // out-of-sequence HELLO makes the server close
    let msgs = raw_exchange(running.addr, &bytes).await;
    let got: Vec<u64> = msgs
        .iter()
        .filter_map(|m| match m {
            Message::SteerResp(f) => Some(f.request_id),
            _ => None,
        })
        .collect();
    assert_eq!(got, ids);
    running.stop().await;
}

#[tokio::test]
async fn invalid_profile_is_refused_at_startup() {
    let mut profile = random_profile(12, 4, 2, SteerMode::Rotate);
    profile.entries[0].vector[0] += 0.5;
    assert!(matches!(SteeringService::new(profile, true), Err(ServiceError::InvalidProfile(_))));
}

#[tokio::test]
async fn bind_failure_is_a_startup_error() {
    let taken = bind("127.0.0.1:0").await.unwrap();
    let addr = taken.local_addr().unwrap();
    match bind(addr).await {
        Err(ServiceError::Bind { .. }) => {}
        other => panic!("expected bind error, got {other:?}"),
    }
}

#[tokio::test]
async fn shutdown_stops_accepting_and_drops_open_connections() {
    let running = start(random_profile(13, 4, 2, SteerMode::Rotate), true).await;
    let addr = running.addr;
    let mut idle = SteerClient::connect(addr, None).await.unwrap();
    running.stop().await;
    assert!(idle.steer(vec![HeadActivation { head: HeadId::new(0, 0), x: vec![1.0; 4] }]).await.is_err());
    assert!(TcpStream::connect(addr).await.is_err());
}
