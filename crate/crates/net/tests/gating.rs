mod common;

use std::time::Duration;

use cfas_core::imageguard::{extract_watermark, looks_protected, notice_image};
use cfas_core::notify::{Audience, MessageKind};
use cfas_core::MechanismKind;
use cfas_net::runtime::Parts;
use common::{eventually, messages_matching, start, start_parts, Env};

const MEME: &str = "https://facebook.mock/media/meme_blocked.png";

fn png(w: u32, h: u32, rgb: [u8; 3]) -> Vec<u8> {
    let img = image::RgbImage::from_fn(w, h, |x, y| {
        image::Rgb([rgb[0], rgb[1].wrapping_add((x % 7) as u8), rgb[2].wrapping_add((y % 5) as u8)])
    });
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png).unwrap();
    out
}

async fn wait_registered(env: &Env) {
    let client = env.stack.iwp.as_ref().unwrap().backend.clone().unwrap();
    eventually("back-end registration", Duration::from_secs(10), || client.token()).await;
}

async fn upload(env: &Env, bytes: Vec<u8>) -> reqwest::Response {
    env.browser()
        .post("https://facebook.mock/api/photos?audience=family")
        .header("content-type", "image/png")
        .body(bytes)
        .send()
        .await
        .unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn notify_only_level_passes_meme_unmodified_and_notifies() {
    let env = start(|_, _| {}).await;
    let mum = env.listen("mum");
    let kid = env.listen("kid");
    let original = env.direct().get(MEME).send().await.unwrap().bytes().await.unwrap();
    let proxied = env.browser().get(MEME).send().await.unwrap().bytes().await.unwrap();
    assert_eq!(proxied, original);
    let is_meme = |m: &cfas_core::notify::PushMessage| m.kind == MessageKind::Incident;
    let to_mum = messages_matching(&mum, "custodian meme notification", is_meme).await;
    assert_eq!(to_mum[0].recipient, Audience::Custodian);
    assert!(to_mum[0].text.contains("John"), "{}", to_mum[0].text);
    messages_matching(&kid, "child meme notification", is_meme).await;
    let applied = env.iwp().applied_decisions();
    assert!(applied.iter().all(|d| d.decision == cfas_core::dal::InterceptDecision::Pass));
    env.stack.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn enforced_meme_is_replaced_by_the_notice_image() {
    let env = start(|_, _| {}).await;
    env.enforce(&[MechanismKind::HatefulMeme]).await;
    let resp = env.browser().get(MEME).send().await.unwrap();
    assert_eq!(resp.headers()["content-type"], "image/png");
    assert_eq!(resp.bytes().await.unwrap().as_ref(), notice_image());
    // Benign feed images are untouched.
    let landscape = "https://facebook.mock/media/feed_landscape.png";
    let direct = env.direct().get(landscape).send().await.unwrap().bytes().await.unwrap();
    let proxied = env.browser().get(landscape).send().await.unwrap().bytes().await.unwrap();
    assert_eq!(direct, proxied);
    env.stack.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn enforced_bullying_is_redacted_in_the_chat_page() {
    let env = start(|_, _| {}).await;
    let direct = env.direct().get("https://facebook.mock/chat/eve").send().await.unwrap().text().await.unwrap();
    let at_l1 = env.browser().get("https://facebook.mock/chat/eve").send().await.unwrap().text().await.unwrap();
    assert_eq!(at_l1, direct, "notify-only level never alters pages");

    let env = start(|_, _| {}).await;
    env.enforce(&[MechanismKind::Cyberbullying]).await;
    let page = env.browser().get("https://facebook.mock/chat/eve").send().await.unwrap().text().await.unwrap();
    assert!(!page.contains("loser"), "{page}");
    assert!(page.contains(">*** *** **** * *****<"), "{page}");
    assert!(page.contains("stay away from us"), "benign lines stay readable: {page}");
    // A second render of the same items applies the same redaction.
    let again = env.browser().get("https://facebook.mock/chat/eve").send().await.unwrap().text().await.unwrap();
    assert_eq!(again, page);
    env.stack.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn blocklist_applies_at_level_two_only() {
    let env = start(|cfg, dir| {
        let path = dir.join("blocklist.txt");
        std::fs::write(&path, "# test list\nyoutube.mock\n").unwrap();
        cfg.iwp.blocklist_path = Some(path);
    })
    .await;
    let url = "https://youtube.mock/watch?v=v124";
    assert_eq!(env.browser().get(url).send().await.unwrap().status(), 200);
    env.enforce(&[MechanismKind::HatefulMeme]).await;
    let err = env.browser().get(url).send().await;
    // CONNECT is refused with the synthetic page, so the tunnel never opens.
    assert!(err.is_err() || err.unwrap().status() == 403);
    assert_eq!(env.browser().get("https://twitter.mock/alice").send().await.unwrap().status(), 200);
    env.stack.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn uploads_are_watermarked_or_protected_when_enforced() {
    let env = start(|_, _| {}).await;
    wait_registered(&env).await;
    env.enforce(&[MechanismKind::SensitiveImage]).await;

    let benign = png(64, 64, [20, 90, 200]);
    let r = upload(&env, benign.clone()).await;
    assert_eq!(r.status(), 200);
    let url: serde_json::Value = r.json().await.unwrap();
    let stored = env
        .direct()
        .get(format!("https://facebook.mock{}", url["url"].as_str().unwrap()))
        .send()
        .await
        .unwrap()
        .bytes()
        .await
        .unwrap();
    assert_ne!(stored.as_ref(), benign.as_slice());
    let mark = extract_watermark(&stored).unwrap().expect("watermark present");
    assert!(mark.verify());

    let skin = png(64, 64, [200, 120, 100]);
    let r = upload(&env, skin.clone()).await;
    assert_eq!(r.status(), 200);
    let url: serde_json::Value = r.json().await.unwrap();
    let media = format!("https://facebook.mock{}", url["url"].as_str().unwrap());
    let stored = env.direct().get(&media).send().await.unwrap().bytes().await.unwrap();
    assert!(looks_protected(&stored), "platform only ever holds the cover");
    let seen_by_child = env.browser().get(&media).send().await.unwrap().bytes().await.unwrap();
    assert_eq!(seen_by_child.as_ref(), skin.as_slice());
    env.stack.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn protection_fails_closed_without_a_key_service() {
    let parts = Parts {
        backend: false,
        mocks: true,
        iwp: true,
    };
    let env = start_parts(parts, |cfg, _| {
        cfg.iwp.backend_url = Some("http://127.0.0.1:9".into());
    })
    .await;
    env.enforce(&[MechanismKind::SensitiveImage]).await;
    let r = upload(&env, png(32, 32, [200, 120, 100])).await;
    assert_eq!(r.status(), 403);
    env.stack.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn pii_post_is_blocked_when_enforced_and_held_for_dismissal_otherwise() {
    let env = start(|_, _| {}).await;
    let mum = env.listen("mum");
    let post = serde_json::json!({"text": "call me on 555-123-4567 after school"});
    let r = env.browser().post("https://facebook.mock/api/posts").json(&post).send().await.unwrap();
    assert_eq!(r.status(), 200);
    let ev = env
        .iwp()
        .applied_decisions()
        .into_iter()
        .find(|d| d.kind == cfas_core::EventKind::PostCompose)
        .unwrap();
    let jobs = env.iwp().dal().jobs_for_event(&ev.event_id);
    let pii = jobs.iter().find(|j| j.job.mechanism == MechanismKind::PiiExposure).unwrap();
    tokio::time::sleep(Duration::from_millis(300)).await;
    assert!(mum.received().is_empty(), "custodian waits for the child's dismissal");
    env.iwp().child_dismissed(&pii.job.exec_id.0);
    messages_matching(&mum, "released pii notification", |m| m.kind == MessageKind::Incident).await;

    env.enforce(&[MechanismKind::PiiExposure]).await;
    let r = env.browser().post("https://facebook.mock/api/posts").json(&post).send().await.unwrap();
    assert_eq!(r.status(), 403);
    assert_eq!(r.headers()["x-cfas-blocked"], "pii_exposure");
    let wall = env.direct().get("https://facebook.mock/wall").send().await.unwrap().text().await.unwrap();
    assert_eq!(wall.matches("555-123-4567").count(), 1, "only the unenforced post went out");
    env.stack.stop().await;
}
