//! Client behavior against a scripted in-memory peer.

use headsteer_client::{ClientError, SteerClient};
use headsteer_core::steer::HeadActivation;
use headsteer_core::wire::{read_message, write_message, Message, SteerFrame, ANY_PROFILE, PROTOCOL_VERSION};
use headsteer_core::HeadId;
use tokio::io::DuplexStream;

async fn peer<F>(script: F) -> DuplexStream
where
    F: FnOnce(DuplexStream) -> tokio::task::JoinHandle<()>,
{
    let (client_end, server_end) = tokio::io::duplex(1 << 16);
    script(server_end);
    client_end
}

fn entry(x: f32) -> HeadActivation {
    HeadActivation { head: HeadId::new(0, 1), x: vec![x, x] }
}

#[tokio::test]
async fn handshake_sends_wildcard_digest_and_reads_ack() {
    let stream = peer(|mut s| {
        tokio::spawn(async move {
            let hello = read_message(&mut s).await.unwrap();
            assert_eq!(hello, Message::Hello { version: PROTOCOL_VERSION, profile_digest: ANY_PROFILE });
            write_message(&mut s, &Message::HelloAck { head_dim: 2, head_count: 7 }).await.unwrap();
        })
    })
    .await;
    let client = SteerClient::handshake(stream, None).await.unwrap();
    assert_eq!(client.session().head_dim, 2);
    assert_eq!(client.session().head_count, 7);
}

#[tokio::test]
async fn steer_assigns_increasing_ids_and_returns_entries() {
    let stream = peer(|mut s| {
        tokio::spawn(async move {
            read_message(&mut s).await.unwrap();
            write_message(&mut s, &Message::HelloAck { head_dim: 2, head_count: 1 }).await.unwrap();
            for want in 0..3u64 {
                let Message::SteerReq(frame) = read_message(&mut s).await.unwrap() else { panic!() };
                assert_eq!(frame.request_id, want);
                let entries = frame.entries.iter().map(|e| HeadActivation { head: e.head, x: vec![-e.x[0]; 2] }).collect();
                write_message(&mut s, &Message::SteerResp(SteerFrame { request_id: want, entries })).await.unwrap();
            }
        })
    })
    .await;
    let mut client = SteerClient::handshake(stream, Some([3; 32])).await.unwrap();
    for i in 0..3 {
        let out = client.steer(vec![entry(i as f32)]).await.unwrap();
        assert_eq!(out, vec![entry(-(i as f32))]);
    }
}

#[tokio::test]
async fn server_errors_and_id_mismatches_surface() {
    let stream = peer(|mut s| {
        tokio::spawn(async move {
            read_message(&mut s).await.unwrap();
            write_message(&mut s, &Message::HelloAck { head_dim: 2, head_count: 1 }).await.unwrap();
            read_message(&mut s).await.unwrap();
            write_message(&mut s, &Message::error(2, "head L0H1 is not in the profile")).await.unwrap();
            read_message(&mut s).await.unwrap();
            let wrong = SteerFrame { request_id: 99, entries: vec![entry(0.0)] };
            write_message(&mut s, &Message::SteerResp(wrong)).await.unwrap();
        })
    })
    .await;
    let mut client = SteerClient::handshake(stream, None).await.unwrap();
    assert!(matches!(client.steer(vec![entry(1.0)]).await, Err(ClientError::Server { code: 2, .. })));
    assert!(matches!(client.steer(vec![entry(1.0)]).await, Err(ClientError::Protocol(_))));
    assert!(matches!(client.steer(vec![entry(1.0)]).await, Err(ClientError::Closed | ClientError::Io(_))));
}

#[tokio::test]
async fn rejected_handshake_is_reported() {
    let stream = peer(|mut s| {
        tokio::spawn(async move {
            read_message(&mut s).await.unwrap();
            write_message(&mut s, &Message::error(6, "profile digest does not match")).await.unwrap();
        })
    })
    .await;
    assert!(matches!(SteerClient::handshake(stream, Some([1; 32])).await, Err(ClientError::Server { code: 6, .. })));
}
