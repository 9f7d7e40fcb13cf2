//! Target devices and the data-item kind each one implies.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Registered target device identifiers. The representation is a plain
/// string so future targets can be added without touching the graph types;
/// comparison is exact string match.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceTarget(String);

/// Devices accepted by [`DeviceTarget::parse`].
pub const REGISTERED_TARGETS: [&str; 2] = ["CPU", "GPU"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown device target `{0}`")]
pub struct UnknownDevice(pub String);

impl DeviceTarget {
    pub fn cpu() -> Self {
        DeviceTarget("CPU".to_owned())
    }

    pub fn gpu() -> Self {
        DeviceTarget("GPU".to_owned())
    }

    /// Parses a device identifier, rejecting anything not registered.
    pub fn parse(s: &str) -> Result<Self, UnknownDevice> {
        if REGISTERED_TARGETS.contains(&s) {
            Ok(DeviceTarget(s.to_owned()))
        } else {
            Err(UnknownDevice(s.to_owned()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_gpu(&self) -> bool {
        self.0 == "GPU"
    }

    pub fn is_cpu(&self) -> bool {
        self.0 == "CPU"
    }

    /// Lowercase qualifier used to select macro definitions per device.
    pub fn qualifier(&self) -> String {
        self.0.to_ascii_lowercase()
    }
}

impl std::fmt::Display for DeviceTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// The data item a task function consumes, a pure function of its device:
/// packets batch blocks for transfer to an accelerator, wrappers reference
/// host-resident tiles in place.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataItemKind {
    DataPacket,
    TileWrapper,
}

impl DataItemKind {
    pub fn for_device(device: &DeviceTarget) -> Self {
        if device.is_gpu() {
            DataItemKind::DataPacket
        } else {
            DataItemKind::TileWrapper
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_accepts_registered_targets() {
        assert!(DeviceTarget::parse("CPU").unwrap().is_cpu());
        assert!(DeviceTarget::parse("GPU").unwrap().is_gpu());
    }

    #[test]
    fn parse_rejects_unknown() {
        assert_eq!(
            DeviceTarget::parse("FPGA"),
            Err(UnknownDevice("FPGA".to_owned()))
        );
        // comparison is case-sensitive by design
        assert!(DeviceTarget::parse("gpu").is_err());
    }

    #[test]
    fn data_item_kind_follows_device() {
        assert_eq!(
            DataItemKind::for_device(&DeviceTarget::gpu()),
            DataItemKind::DataPacket
        );
        assert_eq!(
            DataItemKind::for_device(&DeviceTarget::cpu()),
            DataItemKind::TileWrapper
        );
    }
}
