//! Settings from flags, environment and the config file, in that order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use brickpad_core::motorctl::{MotorPort, DEFAULT_POWER};
use brickpad_core::session::SessionConfig;
use brickpad_core::LinkEndpoint;
use serde::Deserialize;

pub const DEFAULT_HTTP: &str = "127.0.0.1:8080";

/// The config file. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub link: Option<String>,
    pub http: Option<String>,
    pub power: Option<u8>,
    pub brake: Option<bool>,
    /// Motor block names keyed by port letter.
    pub labels: BTreeMap<String, String>,
    pub session: Option<SessionConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub endpoint: Option<LinkEndpoint>,
    pub http: String,
    pub power: u8,
    pub brake: bool,
    pub labels: [String; 3],
    pub session: SessionConfig,
}

#[derive(Debug, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// `$XDG_CONFIG_HOME/brickpad/config.toml`, else under `~/.config`.
pub fn default_path(env: &dyn Fn(&str) -> Option<String>) -> Option<PathBuf> {
    let base = match env("XDG_CONFIG_HOME").filter(|v| !v.is_empty()) {
        Some(dir) => PathBuf::from(dir),
        None => PathBuf::from(env("HOME")?).join(".config"),
    };
    Some(base.join("brickpad").join("config.toml"))
}

pub fn parse_file(text: &str, origin: &Path) -> Result<FileConfig, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError(format!("{}: {e}", origin.display())))
}

/// Load `explicit` (must exist) or the default path (may be absent).
pub fn load_file(explicit: Option<&Path>, env: &dyn Fn(&str) -> Option<String>) -> Result<FileConfig, ConfigError> {
    let (path, required) = match explicit {
        Some(p) => (p.to_path_buf(), true),
        None => match default_path(env) {
            Some(p) => (p, false),
            None => return Ok(FileConfig::default()),
        },
    };
    match fs::read_to_string(&path) {
        Ok(text) => parse_file(&text, &path),
        Err(e) if !required && e.kind() == std::io::ErrorKind::NotFound => Ok(FileConfig::default()),
        Err(e) => Err(ConfigError(format!("{}: {e}", path.display()))),
    }
}

fn parse_env<T: std::str::FromStr>(env: &dyn Fn(&str) -> Option<String>, key: &str) -> Result<Option<T>, ConfigError> {
    match env(key) {
        Some(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| ConfigError(format!("{key}: cannot parse {v:?}"))),
        _ => Ok(None),
    }
}

/// Flag values win over the environment, which wins over the file.
pub fn resolve(
    link_flag: Option<&str>,
    http_flag: Option<&str>,
    env: &dyn Fn(&str) -> Option<String>,
    file: FileConfig,
) -> Result<CliConfig, ConfigError> {
    let link = link_flag
        .map(str::to_string)
        .or(parse_env::<String>(env, "BRICKPAD_LINK")?)
        .or(file.link);
    let endpoint = link
        .map(|l| l.parse::<LinkEndpoint>().map_err(|e| ConfigError(e.to_string())))
        .transpose()?;
    let http = http_flag
        .map(str::to_string)
        .or(parse_env(env, "BRICKPAD_HTTP")?)
        .or(file.http)
        .unwrap_or_else(|| DEFAULT_HTTP.to_string());
    let power = parse_env(env, "BRICKPAD_POWER")?.or(file.power).unwrap_or(DEFAULT_POWER);
    if !(1..=100).contains(&power) {
        return Err(ConfigError(format!("power {power} out of range 1..100")));
    }
    let brake = parse_env(env, "BRICKPAD_BRAKE")?.or(file.brake).unwrap_or(true);

    let mut labels = MotorPort::ALL.map(|p| p.default_label().to_string());
    for (key, label) in file.labels {
        let port: MotorPort = key.parse().map_err(|_| ConfigError(format!("labels: unknown port {key:?}")))?;
        labels[usize::from(port.index())] = label;
    }

    let mut session = file.session.unwrap_or_default();
    if let Some(v) = parse_env(env, "BRICKPAD_CONNECT_TIMEOUT_MS")? {
        session.connect_timeout_ms = v;
    }
    if let Some(v) = parse_env(env, "BRICKPAD_REQUEST_TIMEOUT_MS")? {
        session.request_timeout_ms = v;
    }
    if let Some(v) = parse_env(env, "BRICKPAD_POLL_INTERVAL_MS")? {
        session.poll_interval_ms = v;
    }
    if let Some(v) = parse_env(env, "BRICKPAD_KEEPALIVE")? {
        session.keepalive = v;
    }

    Ok(CliConfig {
        endpoint,
        http,
        power,
        brake,
        labels,
        session,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env_of(pairs: &'static [(&'static str, &'static str)]) -> impl Fn(&str) -> Option<String> {
        move |k| pairs.iter().find(|(key, _)| *key == k).map(|(_, v)| v.to_string())
    }

    fn file(link: &str) -> FileConfig {
        FileConfig {
            link: Some(link.into()),
            ..FileConfig::default()
        }
    }

    #[test]
    fn link_precedence() {
        let env = env_of(&[("BRICKPAD_LINK", "tcp:env:1")]);
        let no_env = env_of(&[]);
        let pick = |flag, env: &dyn Fn(&str) -> Option<String>, f| resolve(flag, None, env, f).unwrap().endpoint;
        assert_eq!(pick(Some("emu:"), &env, file("tcp:file:2")), Some(LinkEndpoint::Emu));
        assert_eq!(
            pick(None, &env, file("tcp:file:2")),
            Some(LinkEndpoint::Tcp {
                host: "env".into(),
                port: 1
            })
        );
        assert_eq!(
            pick(None, &no_env, file("tcp:file:2")),
            Some(LinkEndpoint::Tcp {
                host: "file".into(),
                port: 2
            })
        );
        assert_eq!(pick(None, &no_env, FileConfig::default()), None);
    }

    #[test]
    fn file_keys() {
        let text = r#"
            link = "serial:/dev/rfcomm0"
            http = "0.0.0.0:9000"
            power = 40
            brake = false

            [labels]
            B = "Elbow"

            [session]
            request_timeout_ms = 250
            reconnect = true
        "#;
        let f = parse_file(text, Path::new("c.toml")).unwrap();
        let cfg = resolve(None, None, &env_of(&[("BRICKPAD_POWER", "55")]), f).unwrap();
        assert_eq!(cfg.endpoint, Some(LinkEndpoint::Serial("/dev/rfcomm0".into())));
        assert_eq!(cfg.http, "0.0.0.0:9000");
        assert_eq!(cfg.power, 55);
        assert!(!cfg.brake);
        assert_eq!(cfg.labels, ["Rotate", "Elbow", "Claw"]);
        assert_eq!(cfg.session.request_timeout_ms, 250);
        assert!(cfg.session.reconnect);
        assert_eq!(cfg.session.poll_interval_ms, 200);
    }

    #[test]
    fn bad_values() {
        let none = env_of(&[]);
        assert!(parse_file("colour = 1", Path::new("c.toml")).is_err());
        assert!(resolve(Some("bluetooth:x"), None, &none, FileConfig::default()).is_err());
        assert!(resolve(None, None, &env_of(&[("BRICKPAD_POWER", "0")]), FileConfig::default()).is_err());
        assert!(resolve(None, None, &env_of(&[("BRICKPAD_REQUEST_TIMEOUT_MS", "soon")]), FileConfig::default()).is_err());
    }

    #[test]
    fn default_path_prefers_xdg() {
        let p = default_path(&env_of(&[("XDG_CONFIG_HOME", "/x"), ("HOME", "/h")])).unwrap();
        assert_eq!(p, PathBuf::from("/x/brickpad/config.toml"));
        let p = default_path(&env_of(&[("HOME", "/h")])).unwrap();
        assert_eq!(p, PathBuf::from("/h/.config/brickpad/config.toml"));
    }
}
