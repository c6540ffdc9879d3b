//! Helpers shared by the gateway integration tests.
#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;

pub fn caravan(args: &[&str]) -> Output {
    caravan_with_env(args, &[])
}

pub fn caravan_with_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_caravan"));
    cmd.args(args).env_remove("CARAVAN_DATA_DIR");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("run caravan")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn generate_corpus(out: &Path, packages: usize, categories: &str, seed: u64) {
    let o = caravan(&[
        "corpus",
        "generate",
        "--out",
        out.to_str().unwrap(),
        "--packages",
        &packages.to_string(),
        "--categories",
        categories,
        "--mode",
        "disjoint",
        "--seed",
        &seed.to_string(),
    ]);
    assert!(o.status.success(), "corpus generate failed: {}", stderr(&o));
}

/// Drops the attributes that legitimately differ between runs.
pub fn strip_volatile(xml: &str) -> String {
    let mut out = xml.to_string();
    for attr in [" run=\"", " started=\"", " finished=\""] {
        while let Some(start) = out.find(attr) {
            let value_start = start + attr.len();
            let end = value_start + out[value_start..].find('"').expect("closing quote");
            out.replace_range(start..=end, "");
        }
    }
    out
}

pub struct Server {
    child: Child,
    pub base: String,
}

impl Server {
    pub fn start(data_dir: &Path, workers: usize) -> Self {
        let mut child = Command::new(env!("CARGO_BIN_EXE_caravan"))
            .args([
                "serve",
                "--addr",
                "127.0.0.1:0",
                "--data-dir",
                data_dir.to_str().unwrap(),
                "--workers",
                &workers.to_string(),
            ])
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .expect("spawn server");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .expect("read listen address");
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected first line {line:?}"))
            .to_string();
        Self {
            child,
            base: format!("http://{addr}"),
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub struct Reply {
    pub status: u16,
    pub content_type: String,
    pub body: String,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.body).unwrap_or_else(|e| panic!("not JSON ({e}): {}", self.body))
    }
}

pub struct Http {
    agent: ureq::Agent,
    pub base: String,
}

impl Http {
    pub fn new(base: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Self {
            agent,
            base: base.to_string(),
        }
    }

    fn reply(r: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Reply {
        let mut r = r.expect("request failed");
        let content_type = r
            .headers()
            .get("content-type")
            .and_then(|v| v.to_str().ok())
            .unwrap_or("")
            .to_string();
        Reply {
            status: r.status().as_u16(),
            content_type,
            body: r.body_mut().read_to_string().expect("read body"),
        }
    }

    pub fn get(&self, path: &str) -> Reply {
        Self::reply(self.agent.get(format!("{}{path}", self.base)).call())
    }

    pub fn get_accept(&self, path: &str, accept: &str) -> Reply {
        Self::reply(self.agent.get(format!("{}{path}", self.base)).header("Accept", accept).call())
    }

    pub fn post_raw(&self, path: &str, body: &str) -> Reply {
        Self::reply(
            self.agent
                .post(format!("{}{path}", self.base))
                .header("Content-Type", "application/json")
                .send(body),
        )
    }

    pub fn post(&self, path: &str, body: &Value) -> Reply {
        self.post_raw(path, &body.to_string())
    }

    pub fn post_multipart(&self, path: &str, fields: &[(&str, &str)], file: &[u8]) -> Reply {
        let boundary = "caravan-test-boundary";
        let mut body = Vec::new();
        for (name, value) in fields {
            body.extend_from_slice(
                format!("--{boundary}\r\nContent-Disposition: form-data; name=\"{name}\"\r\n\r\n{value}\r\n").as_bytes(),
            );
        }
        body.extend_from_slice(
            format!(
                "--{boundary}\r\nContent-Disposition: form-data; name=\"file\"; filename=\"p.zip\"\r\nContent-Type: application/zip\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(file);
        body.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
        Self::reply(
            self.agent
                .post(format!("{}{path}", self.base))
                .header("Content-Type", format!("multipart/form-data; boundary={boundary}"))
                .send(&body[..]),
        )
    }

    /// Polls a task until it is terminal and returns its final state.
    pub fn wait_task(&self, task_id: &str) -> Value {
        let deadline = Instant::now() + Duration::from_secs(120);
        loop {
            let t = self.get(&format!("/api/tasks/{task_id}")).json();
            let status = t["state"]["status"].as_str().unwrap_or("").to_string();
            if ["succeeded", "failed", "cancelled"].contains(&status.as_str()) {
                return t;
            }
            assert!(Instant::now() < deadline, "task {task_id} did not finish");
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    /// Polls until no task is queued or running.
    pub fn wait_idle(&self) {
        let deadline = Instant::now() + Duration::from_secs(120);
        loop {
            let snap = self.get("/api/tasks").json();
            let busy = ["queued", "running"]
                .iter()
                .map(|s| snap["counts"][*s].as_u64().unwrap_or(0))
                .sum::<u64>();
            if busy == 0 {
                return;
            }
            assert!(Instant::now() < deadline, "queue did not drain");
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

/// Names of the missing keys of a JSON object.
pub fn missing_keys(v: &Value, keys: &[&str]) -> Vec<String> {
    keys.iter()
        .filter(|k| v.get(**k).is_none())
        .map(|k| k.to_string())
        .collect()
}

/// True if `v` is an ApiError body with the given status and code.
pub fn is_api_error(v: &Value, status: u16, code: &str) -> bool {
    v["status"].as_u64() == Some(status as u64)
        && v["code"].as_str() == Some(code)
        && v["message"].is_string()
        && (v.get("details").is_none() || v["details"].is_null() || v["details"].is_array())
}
