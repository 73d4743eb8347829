// SPDX-License-Identifier: Apache-2.0

use std::collections::HashSet;
use std::fmt::Write as _;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::Path;

use crate::error::{Error, Result};

/// `rank -> host:port` for every worker of a gang.
///
/// Text form, one line per rank, `#` starts a comment:
///
/// ```text
/// # rank address
/// 0 127.0.0.1:47001
/// 1 127.0.0.1:47002
/// ```
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HostMap {
    addresses: Vec<String>,
}

impl HostMap {
    /// Builds a map from addresses listed in rank order.
    pub fn new(addresses: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (rank, a) in addresses.iter().enumerate() {
            if !a.contains(':') {
                return Err(Error::Config(format!(
                    "address `{a}` for rank {rank} is not host:port"
                )));
            }
            if !seen.insert(a.as_str()) {
                return Err(Error::Setup(format!(
                    "address collision: `{a}` is assigned to more than one rank"
                )));
            }
        }
        Ok(HostMap { addresses })
    }

    pub fn from_socket_addrs(addrs: &[SocketAddr]) -> Result<Self> {
        Self::new(addrs.iter().map(|a| a.to_string()).collect())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, usize, String)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| Error::HostMap {
                line: line_no,
                message,
            };
            let mut fields = line.split_whitespace();
            let (Some(rank), Some(addr), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(bad(format!("expected `<rank> <host>:<port>`, got `{line}`")));
            };
            let rank: usize = rank
                .parse()
                .map_err(|_| bad(format!("rank `{rank}` is not a non-negative integer")))?;
            match addr.rsplit_once(':') {
                Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => {}
                _ => return Err(bad(format!("address `{addr}` is not host:port"))),
            }
            if let Some((_, prev, _)) = entries.iter().find(|(r, _, _)| *r == rank) {
                return Err(bad(format!("rank {rank} already listed on line {prev}")));
            }
            entries.push((rank, line_no, addr.to_string()));
        }
        if entries.is_empty() {
            return Err(Error::HostMap {
                line: 0,
                message: "host map lists no ranks".into(),
            });
        }
        entries.sort_by_key(|(r, _, _)| *r);
        for (expected, (rank, line, _)) in entries.iter().enumerate() {
            if *rank != expected {
                return Err(Error::HostMap {
                    line: *line,
                    message: format!("rank {rank} listed but rank {expected} is missing"),
                });
            }
        }
        Self::new(entries.into_iter().map(|(_, _, a)| a).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read host map {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (rank, a) in self.addresses.iter().enumerate() {
            let _ = writeln!(out, "{rank} {a}");
        }
        out
    }

    pub fn len(&self) -> usize {
        self.addresses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.addresses.is_empty()
    }

    pub fn address(&self, rank: usize) -> Result<&str> {
        self.addresses
            .get(rank)
            .map(String::as_str)
            .ok_or_else(|| Error::contract(format!("rank {rank} not in host map")))
    }

    pub fn resolve(&self, rank: usize) -> Result<SocketAddr> {
        let a = self.address(rank)?;
        a.to_socket_addrs()
            .map_err(|e| Error::Setup(format!("cannot resolve `{a}` for rank {rank}: {e}")))?
            .next()
            .ok_or_else(|| Error::Setup(format!("`{a}` for rank {rank} resolved to nothing")))
    }
}
