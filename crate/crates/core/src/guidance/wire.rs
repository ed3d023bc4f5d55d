use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{DeltaCamera, GuidanceRequest, NoiseProvider, NoiseQuery};
use crate::error::{Error, Result};
use crate::scene::ImageBuffer;

pub const NOISE_PATH: &str = "/v1/noise-prediction";
pub const HEALTH_PATH: &str = "/v1/health";

/// Row-major `[height, width, channels]` little-endian f32 array, base64 encoded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireArray {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub data_b64: String,
}

impl WireArray {
    pub fn encode(img: &ImageBuffer) -> Self {
        let mut bytes = Vec::with_capacity(img.data().len() * 4);
        for &v in img.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        WireArray {
            shape: vec![img.height(), img.width(), img.channels()],
            dtype: "f32le".into(),
            data_b64: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<ImageBuffer> {
        if self.dtype != "f32le" {
            return Err(Error::validation(format!("unsupported wire dtype {}", self.dtype)));
        }
        let [h, w, c] = self.shape[..] else {
            return Err(Error::shape("[height, width, channels]", format!("{:?}", self.shape)));
        };
        let bytes = STANDARD
            .decode(&self.data_b64)
            .map_err(|e| Error::validation(format!("bad base64 payload: {e}")))?;
        if bytes.len() != 4 * w * h * c {
            return Err(Error::shape(4 * w * h * c, bytes.len()));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        ImageBuffer::from_vec(w, h, c, data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireDeltaCamera {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub t: usize,
    pub delta_camera: WireDeltaCamera,
    pub z_t: WireArray,
    pub condition: WireArray,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub epsilon: WireArray,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireHealth {
    pub status: String,
    #[serde(default)]
    pub model: String,
}

impl WireRequest {
    pub fn from_request(r: &GuidanceRequest) -> Self {
        WireRequest {
            t: r.t,
            delta_camera: WireDeltaCamera {
                azimuth_deg: r.delta_camera.azimuth_deg,
                elevation_deg: r.delta_camera.elevation_deg,
                radius: r.delta_camera.radius,
            },
            z_t: WireArray::encode(&r.z_t),
            condition: WireArray::encode(&r.condition),
        }
    }

    pub fn to_request(&self) -> Result<GuidanceRequest> {
        Ok(GuidanceRequest {
            z_t: self.z_t.decode()?,
            condition: self.condition.decode()?,
            t: self.t,
            delta_camera: DeltaCamera {
                azimuth_deg: self.delta_camera.azimuth_deg,
                elevation_deg: self.delta_camera.elevation_deg,
                radius: self.delta_camera.radius,
            },
        })
    }
}

/// HTTP client for a noise-prediction service.
pub struct RemoteProvider {
    base: String,
    agent: ureq::Agent,
    retries: usize,
}

impl RemoteProvider {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        RemoteProvider {
            base: base_url.trim_end_matches('/').to_string(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            retries: 1,
        }
    }

    pub fn url(&self) -> &str {
        &self.base
    }

    pub fn health(&self) -> Result<WireHealth> {
        let resp = self
            .agent
            .get(&format!("{}{HEALTH_PATH}", self.base))
            .call()
            .map_err(|e| Error::ProviderUnavailable(e.to_string()))?;
        let body = resp.into_string().map_err(|e| Error::ProviderUnavailable(e.to_string()))?;
        serde_json::from_str(&body).map_err(|e| Error::ProviderUnavailable(format!("bad health body: {e}")))
    }

    fn post_once(&self, body: &WireRequest) -> Result<ImageBuffer> {
        let resp = self
            .agent
            .post(&format!("{}{NOISE_PATH}", self.base))
            .set("Content-Type", "application/json")
            .send_string(&serde_json::to_string(body)?)
            .map_err(|e| Error::ProviderUnavailable(e.to_string()))?;
        let text = resp.into_string().map_err(|e| Error::ProviderUnavailable(e.to_string()))?;
        let parsed: WireResponse = serde_json::from_str(&text)
            .map_err(|e| Error::ProviderUnavailable(format!("bad response body: {e}")))?;
        parsed
            .epsilon
            .decode()
            .map_err(|e| Error::ProviderUnavailable(format!("bad epsilon: {e}")))
    }
}

impl NoiseProvider for RemoteProvider {
    fn name(&self) -> &str {
        "remote"
    }

    fn predict(&mut self, q: &NoiseQuery) -> Result<ImageBuffer> {
        let body = WireRequest::from_request(q.request);
        let mut last = None;
        for attempt in 0..=self.retries {
            match self.post_once(&body) {
                Ok(eps) => {
                    if eps.same_shape(&q.request.z_t).is_err() {
                        return Err(Error::ProviderUnavailable(format!(
                            "epsilon shape {} does not match request",
                            eps.shape_string()
                        )));
                    }
                    return Ok(eps);
                }
                Err(e) => {
                    log::warn!("noise request attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}
