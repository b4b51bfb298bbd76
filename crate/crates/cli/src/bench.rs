//! Client-side latency benchmark over the mock platforms.
//!
//! Each action is timed end to end from a scripted client, once talking
//! to the platforms directly and once through the proxy. Runs are serial.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::Context;
use cfas_core::model::{CybersafetyLevel, OptionChange};
use cfas_core::MechanismKind;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Login,
    ChatSend,
    Post,
    ImageUpload,
    ProfileVisit,
    VideoVisit,
}

impl Action {
    pub const ALL: [Action; 6] = [
        Action::Login,
        Action::ChatSend,
        Action::Post,
        Action::ImageUpload,
        Action::ProfileVisit,
        Action::VideoVisit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Login => "login",
            Action::ChatSend => "chat_send",
            Action::Post => "post",
            Action::ImageUpload => "image_upload",
            Action::ProfileVisit => "profile_visit",
            Action::VideoVisit => "video_visit",
        }
    }
}

fn all_actions() -> Vec<Action> {
    Action::ALL.to_vec()
}

fn both_arms() -> Vec<bool> {
    vec![false, true]
}

fn default_reps() -> usize {
    100
}

fn default_warmup() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "all_actions")]
    pub actions: Vec<Action>,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    /// Untimed runs per action and arm before measuring.
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    /// Arms to run: `false` goes straight to the platforms.
    #[serde(default = "both_arms")]
    pub with_cfas: Vec<bool>,
    /// Mechanisms to enforce (Cybersafety level 2) before the proxied arm.
    #[serde(default)]
    pub enforce: Vec<MechanismKind>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            actions: all_actions(),
            repetitions: default_reps(),
            warmup: default_warmup(),
            with_cfas: both_arms(),
            enforce: Vec::new(),
        }
    }
}

impl Scenario {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let s: Scenario = toml::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?;
        anyhow::ensure!(s.repetitions > 0, "repetitions must be positive");
        anyhow::ensure!(!s.actions.is_empty(), "no actions");
        Ok(s)
    }
}

/// Where the services live and what to trust.
#[derive(Debug, Clone)]
pub struct Targets {
    pub proxy: SocketAddr,
    pub household_ca_pem: Vec<u8>,
    pub osn: SocketAddr,
    pub osn_ca_pem: Vec<u8>,
    pub api: SocketAddr,
    pub custodian_token: String,
    pub child_token: String,
}

impl Targets {
    /// Targets of a stack running in this process.
    pub fn from_stack(stack: &cfas_net::runtime::Stack) -> anyhow::Result<Self> {
        let iwp = stack.iwp.as_ref().context("bench needs the IWP")?;
        let mocks = stack.mocks.as_ref().context("bench needs the mock platforms")?;
        let household = stack.config.household()?;
        let custodian = household.custodians().next().context("no custodian")?.member_id.clone();
        Ok(Self {
            proxy: iwp.proxy.addr,
            household_ca_pem: iwp.ca.cert_pem().into_bytes(),
            osn: mocks.osn.addr,
            osn_ca_pem: mocks.ca.cert_pem().into_bytes(),
            api: iwp.api.addr,
            custodian_token: iwp.tokens[&custodian].clone(),
            child_token: iwp.tokens[&household.child().member_id].clone(),
        })
    }

    /// Targets of services started elsewhere from the same config.
    pub fn from_config(cfg: &cfas_net::config::Config) -> anyhow::Result<Self> {
        let read = |p: &Path| std::fs::read(p).with_context(|| format!("reading {}", p.display()));
        let tokens: BTreeMap<String, String> =
            serde_json::from_slice(&read(&cfg.iwp.data_dir.join("tokens.json"))?).context("parsing tokens.json")?;
        let household = cfg.household()?;
        let custodian = household.custodians().next().context("no custodian")?.member_id.clone();
        let token = |id: &str| tokens.get(id).cloned().with_context(|| format!("no token for {id}"));
        Ok(Self {
            proxy: cfg.iwp.proxy_addr,
            household_ca_pem: read(&cfg.iwp.ca_cert_path)?,
            osn: cfg.mocks.osn_addr,
            osn_ca_pem: read(&cfg.mocks.osn_ca_cert_path)?,
            api: cfg.iwp.api_addr,
            custodian_token: token(&custodian)?,
            child_token: token(&household.child().member_id)?,
        })
    }

    /// A client going through the proxy (`with_cfas`) or straight to the
    /// platforms.
    pub fn client(&self, with_cfas: bool) -> anyhow::Result<reqwest::Client> {
        let b = reqwest::Client::builder()
            .use_rustls_tls()
            .tls_built_in_root_certs(false)
            .timeout(Duration::from_secs(30));
        let b = if with_cfas {
            b.proxy(reqwest::Proxy::all(format!("http://{}", self.proxy))?)
                .add_root_certificate(reqwest::Certificate::from_pem(&self.household_ca_pem)?)
        } else {
            let mut b = b
                .no_proxy()
                .add_root_certificate(reqwest::Certificate::from_pem(&self.osn_ca_pem)?);
            for host in cfas_net::mock::OSN_HOSTS {
                b = b.resolve(host, self.osn);
            }
            b
        };
        Ok(b.build()?)
    }

    /// Has a custodian propose, and the child approve, enforcement of
    /// `mechanisms`.
    pub async fn enforce(&self, mechanisms: &[MechanismKind]) -> anyhow::Result<()> {
        let api = reqwest::Client::builder().no_proxy().build()?;
        let change = OptionChange::Cybersafety {
            level: CybersafetyLevel::L2,
            enabled: MechanismKind::ALL.into_iter().collect(),
            enforce: mechanisms.iter().copied().collect(),
        };
        let record: serde_json::Value = api
            .post(format!("http://{}/policy/propose", self.api))
            .bearer_auth(&self.custodian_token)
            .json(&change)
            .send()
            .await?
            .error_for_status()?
            .json()
            .await?;
        let id = record["record_id"].as_str().context("proposal without record id")?;
        api.post(format!("http://{}/policy/decide", self.api))
            .bearer_auth(&self.child_token)
            .json(&serde_json::json!({"record_id": id, "approve": true}))
            .send()
            .await?
            .error_for_status()?;
        Ok(())
    }
}

/// A 96x96 photo-like image dominated by skin tones.
pub fn upload_image() -> Vec<u8> {
    let img = image::RgbImage::from_fn(96, 96, |x, y| {
        let n = ((x * 31 + y * 17) % 23) as u8;
        image::Rgb([195 + n, 118 + n / 2, 96 + n / 3])
    });
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .expect("in-memory png");
    out
}

async fn perform(client: &reqwest::Client, action: Action, n: usize, photo: &[u8]) -> anyhow::Result<()> {
    let fb = "https://facebook.mock";
    let req = match action {
        Action::Login => client
            .post(format!("{fb}/login"))
            .form(&[("user", "john"), ("password", "hunter2")]),
        Action::ChatSend => client
            .post(format!("{fb}/api/chat/send"))
            .json(&serde_json::json!({"to": "amy", "text": format!("see you at practice {n}")})),
        Action::Post => client
            .post(format!("{fb}/api/posts"))
            .json(&serde_json::json!({"text": format!("great match today {n}")})),
        Action::ImageUpload => client
            .post(format!("{fb}/api/photos?audience=family"))
            .header("content-type", "image/png")
            .body(photo.to_vec()),
        Action::ProfileVisit => client.get("https://twitter.mock/eve"),
        Action::VideoVisit => client.get("https://youtube.mock/watch?v=v124"),
    };
    let resp = req.send().await?;
    let status = resp.status();
    resp.bytes().await?;
    anyhow::ensure!(status.is_success(), "{} returned {status}", action.as_str());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub action: Action,
    pub with_cfas: bool,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub rows: Vec<Row>,
    /// Set when an action failed; `rows` then holds what completed.
    pub aborted: Option<String>,
}

impl Report {
    pub fn row(&self, action: Action, with_cfas: bool) -> Option<&Row> {
        self.rows.iter().find(|r| r.action == action && r.with_cfas == with_cfas)
    }

    /// Proxied minus direct mean, for actions measured both ways.
    pub fn overheads(&self) -> BTreeMap<Action, f64> {
        self.rows
            .iter()
            .filter(|r| r.with_cfas)
            .filter_map(|r| Some((r.action, r.mean_ms - self.row(r.action, false)?.mean_ms)))
            .collect()
    }

    pub fn write_csv(&self, out: impl Write) -> anyhow::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["action", "with_cfas", "mean_ms", "p95_ms", "n"])?;
        for r in &self.rows {
            w.write_record([
                r.action.as_str().to_string(),
                r.with_cfas.to_string(),
                format!("{:.3}", r.mean_ms),
                format!("{:.3}", r.p95_ms),
                r.n.to_string(),
            ])?;
        }
        let mut out = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
        if let Some(why) = &self.aborted {
            writeln!(out, "# partial: {}", why.replace('\n', " "))?;
        }
        Ok(())
    }
}

/// Mean and nearest-rank 95th percentile, in milliseconds.
pub fn summarize(samples: &[Duration]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1000.0).collect();
    ms.sort_by(f64::total_cmp);
    let mean = ms.iter().sum::<f64>() / ms.len() as f64;
    let rank = ((0.95 * ms.len() as f64).ceil() as usize).max(1);
    (mean, ms[rank - 1])
}

pub async fn run(scenario: &Scenario, targets: &Targets) -> anyhow::Result<Report> {
    if scenario.with_cfas.contains(&true) && !scenario.enforce.is_empty() {
        targets.enforce(&scenario.enforce).await.context("applying the scenario policy")?;
    }
    let photo = upload_image();
    let mut report = Report {
        rows: Vec::new(),
        aborted: None,
    };
    let mut seq = 0;
    for &action in &scenario.actions {
        for &arm in &scenario.with_cfas {
            let client = targets.client(arm)?;
            let mut samples = Vec::with_capacity(scenario.repetitions);
            for i in 0..scenario.warmup + scenario.repetitions {
                seq += 1;
                let start = Instant::now();
                if let Err(err) = perform(&client, action, seq, &photo).await {
                    report.aborted = Some(format!("{} with_cfas={arm}: {err:#}", action.as_str()));
                    return Ok(report);
                }
                if i >= scenario.warmup {
                    samples.push(start.elapsed());
                }
            }
            let (mean_ms, p95_ms) = summarize(&samples);
            tracing::info!(action = action.as_str(), with_cfas = arm, mean_ms, p95_ms, "measured");
            report.rows.push(Row {
                action,
                with_cfas: arm,
                mean_ms,
                p95_ms,
                n: samples.len(),
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentile() {
        let d: Vec<Duration> = (1..=100).map(Duration::from_millis).collect();
        let (mean, p95) = summarize(&d);
        assert!((mean - 50.5).abs() < 1e-9);
        assert!((p95 - 95.0).abs() < 1e-9);
        let (mean, p95) = summarize(&[Duration::from_millis(7)]);
        assert_eq!((mean, p95), (7.0, 7.0));
    }

    #[test]
    fn scenario_defaults_and_unknown_keys() {
        let s: Scenario = toml::from_str("repetitions = 5").unwrap();
        assert_eq!(s.actions, Action::ALL.to_vec());
        assert_eq!((s.repetitions, s.warmup), (5, 10));
        assert_eq!(s.with_cfas, vec![false, true]);
        let s: Scenario = toml::from_str(r#"actions = ["chat_send"]
enforce = ["sensitive_image"]"#)
        .unwrap();
        assert_eq!(s.enforce, vec![MechanismKind::SensitiveImage]);
        assert!(toml::from_str::<Scenario>("reps = 5").is_err());
    }

    #[test]
    fn partial_csv_is_flagged() {
        let report = Report {
            rows: vec![Row {
                action: Action::Login,
                with_cfas: false,
                mean_ms: 1.25,
                p95_ms: 2.0,
                n: 3,
            }],
            aborted: Some("post with_cfas=true: boom".into()),
        };
        let mut out = Vec::new();
        report.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "action,with_cfas,mean_ms,p95_ms,n\nlogin,false,1.250,2.000,3\n# partial: post with_cfas=true: boom\n"
        );
    }

    #[test]
    fn upload_image_is_mostly_skin() {
        let img = image::load_from_memory(&upload_image()).unwrap().to_rgb8();
        assert!(cfas_core::detectors::skin_ratio(&img) > 0.9);
    }
}
