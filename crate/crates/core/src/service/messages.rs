//! Wire messages: one JSON object per line, tagged by `type` and carrying
//! `protocol_version`.

use serde::{Deserialize, Serialize};

use crate::corridor::SpeedLimit;
use crate::error::{Error, Result};
use crate::guards::Attribution;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    /// A sensor reading; a null field marks missing data.
    SensorUpdate {
        sensor_id: String,
        timestamp: i64,
        speed: Option<f64>,
        occupancy: Option<f64>,
    },
    SpeedLimitCommand {
        gantry_id: String,
        timestamp: i64,
        limit: SpeedLimit,
        attribution: Attribution,
    },
    /// The peer refused a command; the service keeps the previous limit.
    CommandRejected {
        gantry_id: String,
        timestamp: i64,
        #[serde(default)]
        reason: String,
    },
    HealthQuery,
    HealthReply(Health),
    /// Start receiving every published command on this connection.
    Subscribe,
    Subscribed,
    /// Tick out every buffered reading (event clock only).
    Flush,
    Flushed {
        ticks: u64,
    },
    Error {
        message: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub ticks: u64,
    /// Processing time of the most recent tick in microseconds.
    pub last_tick_latency_us: u64,
    pub last_tick_timestamp: Option<i64>,
    pub subscribers: usize,
    pub errors: u64,
    pub late_readings: u64,
    pub rejections: u64,
}

#[derive(Serialize)]
struct EnvelopeRef<'a> {
    protocol_version: u32,
    #[serde(flatten)]
    message: &'a Message,
}

#[derive(Deserialize)]
struct Envelope {
    protocol_version: u32,
    #[serde(flatten)]
    message: Message,
}

impl Message {
    /// Serializes to one line without the trailing newline.
    pub fn encode(&self) -> String {
        serde_json::to_string(&EnvelopeRef {
            protocol_version: PROTOCOL_VERSION,
            message: self,
        })
        .expect("messages always serialize")
    }

    pub fn decode(line: &str) -> Result<Self> {
        let env: Envelope = serde_json::from_str(line.trim()).map_err(|e| Error::Protocol(e.to_string()))?;
        if env.protocol_version != PROTOCOL_VERSION {
            return Err(Error::Protocol(format!(
                "protocol_version {} is not supported (expected {PROTOCOL_VERSION})",
                env.protocol_version
            )));
        }
        Ok(env.message)
    }

    /// The wire `type` tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Message::SensorUpdate { .. } => "sensor_update",
            Message::SpeedLimitCommand { .. } => "speed_limit_command",
            Message::CommandRejected { .. } => "command_rejected",
            Message::HealthQuery => "health_query",
            Message::HealthReply(_) => "health_reply",
            Message::Subscribe => "subscribe",
            Message::Subscribed => "subscribed",
            Message::Flush => "flush",
            Message::Flushed { .. } => "flushed",
            Message::Error { .. } => "error",
        }
    }

    pub fn error(message: impl Into<String>) -> Self {
        Message::Error {
            message: message.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let msgs = vec![
            Message::SensorUpdate {
                sensor_id: "rds01".into(),
                timestamp: 1_713_783_630,
                speed: Some(42.5),
                occupancy: None,
            },
            Message::SpeedLimitCommand {
                gantry_id: "wb01".into(),
                timestamp: 1_713_783_630,
                limit: SpeedLimit::new(50).unwrap(),
                attribution: Attribution::MaxSpeedLimit,
            },
            Message::CommandRejected {
                gantry_id: "wb01".into(),
                timestamp: 3,
                reason: "maintenance".into(),
            },
            Message::HealthQuery,
            Message::HealthReply(Health {
                ticks: 3,
                last_tick_latency_us: 120,
                last_tick_timestamp: Some(90),
                ..Health::default()
            }),
            Message::Subscribe,
            Message::Subscribed,
            Message::Flush,
            Message::Flushed { ticks: 2 },
            Message::error("bad"),
        ];
        for m in msgs {
            let line = m.encode();
            assert!(!line.contains('\n'));
            assert!(line.contains(&format!("\"type\":\"{}\"", m.kind())));
            assert_eq!(Message::decode(&line).unwrap(), m, "{line}");
        }
    }

    #[test]
    fn wire_shape() {
        let line = Message::SensorUpdate {
            sensor_id: "s".into(),
            timestamp: 1,
            speed: None,
            occupancy: Some(0.1),
        }
        .encode();
        assert_eq!(
            line,
            r#"{"protocol_version":1,"type":"sensor_update","sensor_id":"s","timestamp":1,"speed":null,"occupancy":0.1}"#
        );
        assert_eq!(
            Message::HealthQuery.encode(),
            r#"{"protocol_version":1,"type":"health_query"}"#
        );
    }

    #[test]
    fn rejects_malformed() {
        for bad in [
            "not json",
            r#"{"protocol_version":1,"type":"nope"}"#,
            r#"{"type":"health_query"}"#,
            r#"{"protocol_version":2,"type":"health_query"}"#,
            r#"{"protocol_version":1,"type":"speed_limit_command","gantry_id":"g","timestamp":0,"limit":55,"attribution":"Policy"}"#,
        ] {
            assert!(matches!(Message::decode(bad), Err(Error::Protocol(_))), "{bad}");
        }
    }
}
