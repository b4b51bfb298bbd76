mod common;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use axum::routing::get;
use cfas_core::bundle::{bump_version, sha256_hex, DetectorBundle};
use cfas_core::imageguard::KeyService;
use cfas_core::model::PolicyState;
use cfas_core::{EventKind, EventPayload, Platform, TrafficEvent};
use cfas_net::clients::{BackendClient, ClientError, BUNDLE_SHA_HEADER, BUNDLE_VERSION_HEADER};
use cfas_net::runtime::Parts;
use cfas_net::server::serve_plain;
use cfas_net::sync::{poll_once, PollOutcome};
use common::{eventually, start, start_parts, Env};

fn chat_out(text: &str) -> TrafficEvent {
    TrafficEvent::new(
        "kid",
        Platform::FacebookLike,
        EventKind::ChatOut,
        EventPayload::Chat {
            conversation: "amy".into(),
            peer: "amy".into(),
            text: text.into(),
        },
        chrono::Utc::now(),
    )
    .unwrap()
}

fn backend_url(env: &Env) -> String {
    format!("http://{}", env.stack.backend.as_ref().unwrap().http.addr)
}

async fn registered(env: &Env) -> Arc<BackendClient> {
    let client = env.stack.iwp.as_ref().unwrap().backend.clone().unwrap();
    eventually("registration", Duration::from_secs(10), || client.token()).await;
    client
}

async fn publish(env: &Env, bundle: &DetectorBundle, sha: &str) -> reqwest::Response {
    let backend = env.stack.backend.as_ref().unwrap();
    env.api_client()
        .post(format!("{}/bundles", backend_url(env)))
        .bearer_auth(backend.backend.publisher_token())
        .header(BUNDLE_SHA_HEADER, sha)
        .body(bundle.to_zip())
        .send()
        .await
        .unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn published_bundle_is_picked_up_in_one_poll() {
    let env = start(|_, _| {}).await;
    let client = registered(&env).await;
    let iwp = env.iwp().clone();
    let v1 = iwp.detector_version();

    let mut v2 = DetectorBundle::builtin();
    v2.version = bump_version(&v1);
    let zip = v2.to_zip();
    assert_eq!(publish(&env, &v2, "0000").await.status(), 400, "publisher hash is checked");
    assert_eq!(publish(&env, &v2, &sha256_hex(&zip)).await.status(), 200);

    let (i, c) = (iwp.clone(), client.clone());
    let outcome = tokio::task::spawn_blocking(move || poll_once(&i, &c, None)).await.unwrap().unwrap();
    assert_eq!(outcome, PollOutcome::Installed(v2.version.clone()));
    let (i, c) = (iwp.clone(), client.clone());
    let again = tokio::task::spawn_blocking(move || poll_once(&i, &c, None)).await.unwrap().unwrap();
    assert_eq!(again, PollOutcome::Current);

    let i = iwp.clone();
    let analysis = tokio::task::spawn_blocking(move || i.analyze(chat_out("hello"), None, Some(Duration::from_secs(2))))
        .await
        .unwrap()
        .unwrap();
    assert!(!analysis.jobs.is_empty());
    assert!(analysis.jobs.iter().all(|j| j.detector_version == v2.version));
    env.stack.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn tampered_bundle_is_rejected_and_the_old_one_kept() {
    let env = start(|_, _| {}).await;
    let genuine = registered(&env).await;
    let iwp = env.iwp().clone();
    let v1 = iwp.detector_version();

    let mut v2 = DetectorBundle::builtin();
    v2.version = bump_version(&v1);
    let zip = v2.to_zip();
    let sha = sha256_hex(&zip);
    let mut tampered = zip.clone();
    let mid = tampered.len() / 2;
    tampered[mid] ^= 0x55;
    let version = v2.version.clone();
    let router = axum::Router::new().route(
        "/bundles/latest",
        get(move || {
            let (tampered, sha, version) = (tampered.clone(), sha.clone(), version.clone());
            async move { ([(BUNDLE_VERSION_HEADER, version), (BUNDLE_SHA_HEADER, sha)], tampered) }
        }),
    );
    let fake = serve_plain(tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap(), router).await;
    let client = BackendClient::new(&format!("http://{}", fake.addr), Duration::from_secs(5))
        .with_token(&genuine.token().unwrap());
    let i = iwp.clone();
    let outcome = tokio::task::spawn_blocking(move || poll_once(&i, &client, None)).await.unwrap().unwrap();
    assert!(matches!(outcome, PollOutcome::Rejected(_)), "{outcome:?}");
    assert_eq!(iwp.detector_version(), v1);
    fake.stop().await;
    env.stack.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn enrollment_codes_work_once_and_tokens_gate_the_api() {
    let env = start_parts(
        Parts {
            backend: true,
            mocks: false,
            iwp: false,
        },
        |_, _| {},
    )
    .await;
    let backend = &env.stack.backend.as_ref().unwrap().backend;
    let c = env.api_client();
    let enroll = |token: &str| {
        c.post(format!("{}/enroll", backend_url(&env)))
            .bearer_auth(token)
            .json(&serde_json::json!({"household_id": "demo-household"}))
            .send()
    };
    assert_eq!(enroll("wrong").await.unwrap().status(), 401);
    let code: serde_json::Value = enroll(backend.publisher_token()).await.unwrap().json().await.unwrap();
    let code = code["code"].as_str().unwrap().to_string();

    let url = backend_url(&env);
    let client = tokio::task::spawn_blocking(move || {
        let client = BackendClient::new(&url, Duration::from_secs(5));
        assert!(matches!(client.sync(None), Err(ClientError::NoToken)));
        client.register(&code, "iwp-1").unwrap();
        let second = BackendClient::new(&url, Duration::from_secs(5)).register(&code, "iwp-2");
        assert!(matches!(second, Err(ClientError::Status { status: 403, .. })), "{second:?}");
        client
    })
    .await
    .unwrap();
    let bogus = BackendClient::new(&backend_url(&env), Duration::from_secs(5)).with_token("forged");
    tokio::task::spawn_blocking(move || {
        assert!(matches!(bogus.sync(None), Err(ClientError::Status { status: 401, .. })));
        assert!(client.sync(None).unwrap().is_some());
    })
    .await
    .unwrap();
    env.stack.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn fallback_over_http_leaves_nothing_stored() {
    let env = start(|_, _| {}).await;
    let client = registered(&env).await;
    let backend = env.stack.backend.as_ref().unwrap().backend.clone();
    let resp = tokio::task::spawn_blocking(move || {
        let policy = PolicyState::new("demo-household");
        let req = cfas_core::backend::FallbackRequest {
            event: chat_out("text me at 555-867-5309"),
            policy,
            child_name: "John".into(),
            image: None,
        };
        client.fallback_analyze(&req).unwrap()
    })
    .await
    .unwrap();
    assert!(resp.triggered, "{resp:?}");
    assert!(backend.fallback_store().is_empty());
    env.stack.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn image_keys_round_trip_through_the_back_end() {
    let env = start(|_, _| {}).await;
    let client = registered(&env).await;
    tokio::task::spawn_blocking(move || {
        let audience: BTreeSet<String> = ["kid".to_string(), "mum".to_string()].into();
        let key = [7u8; 32];
        let fp = "ab".repeat(32);
        KeyService::register(client.as_ref(), &fp, &audience, &key).unwrap();
        assert_eq!(client.fetch(&fp, "mum").unwrap(), vec![key]);
        assert!(client.fetch(&fp, "stranger").unwrap_or_default().is_empty());
        assert!(KeyService::register(client.as_ref(), "not-a-fingerprint", &audience, &key).is_err());
    })
    .await
    .unwrap();
    env.stack.stop().await;
}
