//! AP-side command handling.
//!
//! Strict ordering follows the bring-up sequence
//! `BandConfig -> CsiConfig -> ReportEnable(1) -> StaFilter* -> ReportConfig`.
//! The band lock applies in both strict and lenient modes.

use std::collections::VecDeque;
use std::net::Ipv4Addr;

use serde::Serialize;

use crate::wire::{decode_command, Band, CommandFrame, CommandPayload, DecodeError, MacAddr, MAX_STA_FILTERS};

/// Reply payload for a successful availability check.
pub const AVAILABILITY_REPLY: &[u8; 2] = b"OK";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ApPhase {
    Booted,
    BandSet,
    Configured,
    Enabled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ApState {
    pub phase: ApPhase,
    pub locked_band: Option<Band>,
    pub frame_type: Option<u8>,
    /// Oldest entry first; the oldest is evicted when a sixth MAC arrives.
    pub filter: VecDeque<MacAddr>,
    /// `None` until a ReportConfig arrives; reports then go to the default target.
    pub target_ip: Option<Ipv4Addr>,
    pub reporting: bool,
}

impl Default for ApState {
    fn default() -> Self {
        Self::booted()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RejectReason {
    BandLocked { locked: Band, requested: Band },
    OutOfOrder { phase: ApPhase },
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::BandLocked { .. } => "band_locked",
            RejectReason::OutOfOrder { .. } => "out_of_order",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Accepted(CommandFrame),
    Rejected { command: CommandFrame, reason: RejectReason },
    /// The datagram was not a valid command and was ignored.
    Dropped(DecodeError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandOutcome {
    pub verdict: Verdict,
    pub reply: Option<Vec<u8>>,
}

impl ApState {
    pub fn booted() -> Self {
        Self {
            phase: ApPhase::Booted,
            locked_band: None,
            frame_type: None,
            filter: VecDeque::new(),
            target_ip: None,
            reporting: false,
        }
    }

    /// Power-cycles the AP: clears the band lock, filter and reporting.
    pub fn reboot(&mut self) {
        *self = Self::booted();
    }

    pub fn admits(&self, mac: &MacAddr) -> bool {
        self.filter.is_empty() || self.filter.contains(mac)
    }

    pub fn handle_datagram(&mut self, datagram: &[u8], strict: bool) -> CommandOutcome {
        match decode_command(datagram) {
            Ok(command) => self.handle_command(command, strict),
            Err(e) => CommandOutcome {
                verdict: Verdict::Dropped(e),
                reply: None,
            },
        }
    }

    pub fn handle_command(&mut self, command: CommandFrame, strict: bool) -> CommandOutcome {
        let reject = |phase, reason| CommandOutcome {
            verdict: Verdict::Rejected {
                command,
                reason: match reason {
                    Some(r) => r,
                    None => RejectReason::OutOfOrder { phase },
                },
            },
            reply: None,
        };
        let accept = CommandOutcome {
            verdict: Verdict::Accepted(command),
            reply: None,
        };
        let phase = self.phase;
        match command.payload {
            CommandPayload::CheckAvailability => {
                return CommandOutcome {
                    verdict: Verdict::Accepted(command),
                    reply: Some(AVAILABILITY_REPLY.to_vec()),
                };
            }
            CommandPayload::BandConfig { band } => {
                if let Some(locked) = self.locked_band {
                    if locked != band {
                        return reject(
                            phase,
                            Some(RejectReason::BandLocked {
                                locked,
                                requested: band,
                            }),
                        );
                    }
                }
                // a band command starts a fresh bring-up sequence
                self.locked_band = Some(band);
                self.phase = ApPhase::BandSet;
                self.frame_type = None;
                self.filter.clear();
                self.reporting = false;
            }
            CommandPayload::CsiConfig { frame_type } => {
                if strict && !matches!(phase, ApPhase::BandSet | ApPhase::Configured) {
                    return reject(phase, None);
                }
                self.frame_type = Some(frame_type);
                self.phase = self.phase.max(ApPhase::Configured);
            }
            CommandPayload::ReportEnable { enable: true } => {
                if strict && phase != ApPhase::Configured {
                    return reject(phase, None);
                }
                self.phase = ApPhase::Enabled;
                self.reporting = true;
            }
            CommandPayload::ReportEnable { enable: false } => {
                self.reporting = false;
            }
            CommandPayload::StaFilter { mac } => {
                if strict && phase != ApPhase::Enabled {
                    return reject(phase, None);
                }
                if !self.filter.contains(&mac) {
                    if self.filter.len() == MAX_STA_FILTERS {
                        self.filter.pop_front();
                    }
                    self.filter.push_back(mac);
                }
            }
            CommandPayload::ReportConfig { target_ip } => {
                if strict && phase != ApPhase::Enabled {
                    return reject(phase, None);
                }
                self.target_ip = Some(target_ip);
            }
        }
        accept
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::encode_command;

    fn mac(last: u8) -> MacAddr {
        MacAddr([0x02, 0, 0, 0, 0, last])
    }

    fn bring_up(state: &mut ApState, band: Band) {
        for cmd in [
            CommandFrame::band_config(band),
            CommandFrame::csi_config(0x22),
            CommandFrame::report_enable(true),
        ] {
            assert!(matches!(
                state.handle_command(cmd, true).verdict,
                Verdict::Accepted(_)
            ));
        }
    }

    #[test]
    fn availability_replies_ok() {
        let mut s = ApState::booted();
        let bytes = encode_command(&CommandFrame::check_availability()).unwrap();
        let out = s.handle_datagram(&bytes, true);
        assert_eq!(out.reply.as_deref(), Some(&[0x4F, 0x4B][..]));
    }

    #[test]
    fn strict_rejects_enable_before_band() {
        let mut s = ApState::booted();
        let before = s.clone();
        let out = s.handle_command(CommandFrame::report_enable(true), true);
        assert!(matches!(
            out.verdict,
            Verdict::Rejected {
                reason: RejectReason::OutOfOrder { phase: ApPhase::Booted },
                ..
            }
        ));
        assert_eq!(s, before);
    }

    #[test]
    fn lenient_accepts_any_order() {
        let mut s = ApState::booted();
        let out = s.handle_command(CommandFrame::report_enable(true), false);
        assert!(matches!(out.verdict, Verdict::Accepted(_)));
        assert!(s.reporting);
        assert_eq!(s.phase, ApPhase::Enabled);
    }

    #[test]
    fn band_lock_and_reboot() {
        let mut s = ApState::booted();
        bring_up(&mut s, Band::Band5G);
        let out = s.handle_command(CommandFrame::band_config(Band::Band2G4), true);
        match out.verdict {
            Verdict::Rejected { reason, .. } => assert_eq!(reason.code(), "band_locked"),
            other => panic!("expected rejection, got {other:?}"),
        }
        assert!(s.reporting);
        assert_eq!(s.locked_band, Some(Band::Band5G));

        // lenient mode still honours the lock
        let out = s.handle_command(CommandFrame::band_config(Band::Band2G4), false);
        assert!(matches!(out.verdict, Verdict::Rejected { .. }));

        s.reboot();
        assert!(!s.reporting);
        assert_eq!(s.locked_band, None);
        let snapshot = s.clone();
        s.reboot();
        assert_eq!(s, snapshot);
        bring_up(&mut s, Band::Band2G4);
        assert_eq!(s.locked_band, Some(Band::Band2G4));
    }

    #[test]
    fn filter_is_fifo_bounded() {
        let mut s = ApState::booted();
        bring_up(&mut s, Band::Band5G);
        for i in 0..7 {
            s.handle_command(CommandFrame::sta_filter(mac(i)), true);
        }
        let kept: Vec<_> = s.filter.iter().copied().collect();
        assert_eq!(kept, (2..7).map(mac).collect::<Vec<_>>());
        // duplicates do not evict
        s.handle_command(CommandFrame::sta_filter(mac(6)), true);
        assert_eq!(s.filter.len(), 5);
        assert_eq!(s.filter[0], mac(2));
    }

    #[test]
    fn admission() {
        let mut s = ApState::booted();
        assert!(s.admits(&mac(1)));
        bring_up(&mut s, Band::Band5G);
        s.handle_command(CommandFrame::sta_filter(mac(1)), true);
        assert!(s.admits(&mac(1)));
        assert!(!s.admits(&mac(2)));
    }

    #[test]
    fn stop_then_restart_same_band() {
        let mut s = ApState::booted();
        bring_up(&mut s, Band::Band5G);
        s.handle_command(CommandFrame::report_config(Ipv4Addr::new(10, 0, 0, 2)), true);
        s.handle_command(CommandFrame::report_enable(false), true);
        assert!(!s.reporting);
        bring_up(&mut s, Band::Band5G);
        assert!(s.reporting);
        assert_eq!(s.target_ip, Some(Ipv4Addr::new(10, 0, 0, 2)));
    }

    #[test]
    fn strict_filter_and_report_config_need_enabled() {
        let mut s = ApState::booted();
        s.handle_command(CommandFrame::band_config(Band::Band5G), true);
        let out = s.handle_command(CommandFrame::sta_filter(mac(1)), true);
        assert!(matches!(out.verdict, Verdict::Rejected { .. }));
        let out = s.handle_command(CommandFrame::report_config(Ipv4Addr::LOCALHOST), true);
        assert!(matches!(out.verdict, Verdict::Rejected { .. }));
        assert!(s.filter.is_empty());
        assert_eq!(s.target_ip, None);
    }

    #[test]
    fn garbage_is_dropped() {
        let mut s = ApState::booted();
        let out = s.handle_datagram(&[0u8; 9], true);
        assert!(matches!(out.verdict, Verdict::Dropped(DecodeError::BadMagic { .. })));
        assert_eq!(out.reply, None);
        assert_eq!(s, ApState::booted());
    }
}
