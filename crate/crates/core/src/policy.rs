//! Security-label algebra.
//!
//! A [`SecurityLabel`] is the access-control list of a data item: either
//! [`SecurityLabel::Public`], which authorizes every present and future user,
//! or an explicit non-empty set of readers. A [`Principal`] is the set of
//! users jointly issuing a query. The projection of a dataset onto a
//! principal keeps the items readable by *every* member of the principal,
//! so projecting onto a union of principals is the intersection of the
//! individual projections.

use std::collections::BTreeSet;
use std::fmt;

use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::error::PolicyError;

/// An opaque, non-empty user identifier.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct UserId(String);

impl UserId {
    pub fn new(id: impl Into<String>) -> Result<Self, PolicyError> {
        let id = id.into();
        if id.is_empty() {
            return Err(PolicyError::EmptyUserId);
        }
        Ok(UserId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for UserId {
    type Error = PolicyError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        UserId::new(value)
    }
}

impl From<UserId> for String {
    fn from(value: UserId) -> Self {
        value.0
    }
}

impl fmt::Debug for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Access-control list of a data item.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub enum SecurityLabel {
    /// Readable by everyone, including users that do not exist yet.
    Public,
    /// Readable by exactly these users. Never empty.
    Users(BTreeSet<UserId>),
}

impl SecurityLabel {
    pub fn users<I, U>(users: I) -> Result<Self, PolicyError>
    where
        I: IntoIterator<Item = U>,
        U: Into<String>,
    {
        let set = users
            .into_iter()
            .map(|u| UserId::new(u))
            .collect::<Result<BTreeSet<_>, _>>()?;
        SecurityLabel::from_set(set)
    }

    pub fn from_set(set: BTreeSet<UserId>) -> Result<Self, PolicyError> {
        if set.is_empty() {
            return Err(PolicyError::EmptyLabel);
        }
        Ok(SecurityLabel::Users(set))
    }

    pub fn is_public(&self) -> bool {
        matches!(self, SecurityLabel::Public)
    }

    /// Explicit reader set, or `None` for [`SecurityLabel::Public`].
    pub fn readers(&self) -> Option<&BTreeSet<UserId>> {
        match self {
            SecurityLabel::Public => None,
            SecurityLabel::Users(set) => Some(set),
        }
    }

    pub fn can_read(&self, user: &UserId) -> bool {
        match self {
            SecurityLabel::Public => true,
            SecurityLabel::Users(set) => set.contains(user),
        }
    }
}

impl fmt::Display for SecurityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SecurityLabel::Public => f.write_str("public"),
            SecurityLabel::Users(set) => {
                f.write_str("{")?;
                for (i, u) in set.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    f.write_str(u.as_str())?;
                }
                f.write_str("}")
            }
        }
    }
}

// Serialized as the string "public" or a sorted array of user ids.
impl Serialize for SecurityLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            SecurityLabel::Public => serializer.serialize_str("public"),
            SecurityLabel::Users(set) => serializer.collect_seq(set.iter()),
        }
    }
}

impl<'de> Deserialize<'de> for SecurityLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct LabelVisitor;

        impl<'de> Visitor<'de> for LabelVisitor {
            type Value = SecurityLabel;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("\"public\" or a non-empty array of user ids")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
                if v == "public" {
                    Ok(SecurityLabel::Public)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Self::Value, A::Error> {
                let mut set = BTreeSet::new();
                while let Some(user) = seq.next_element::<UserId>()? {
                    set.insert(user);
                }
                SecurityLabel::from_set(set).map_err(de::Error::custom)
            }
        }

        deserializer.deserialize_any(LabelVisitor)
    }
}

/// The `{"label": ...}` wrapper used when a label is serialized on its own.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct LabelDocument {
    pub label: SecurityLabel,
}

/// A set of users issuing a query.
///
/// Queries require a non-empty principal; [`Principal::empty`] exists for
/// projection oracles, where the empty set reads everything.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Principal(BTreeSet<UserId>);

impl Principal {
    pub fn new<I, U>(users: I) -> Result<Self, PolicyError>
    where
        I: IntoIterator<Item = U>,
        U: Into<String>,
    {
        let set = users
            .into_iter()
            .map(|u| UserId::new(u))
            .collect::<Result<BTreeSet<_>, _>>()?;
        Principal::from_set(set)
    }

    pub fn from_set(set: BTreeSet<UserId>) -> Result<Self, PolicyError> {
        if set.is_empty() {
            return Err(PolicyError::EmptyPrincipal);
        }
        Ok(Principal(set))
    }

    pub fn empty() -> Self {
        Principal(BTreeSet::new())
    }

    pub fn single(user: UserId) -> Self {
        Principal(BTreeSet::from([user]))
    }

    pub fn users(&self) -> &BTreeSet<UserId> {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn union(&self, other: &Principal) -> Principal {
        Principal(self.0.union(&other.0).cloned().collect())
    }

    pub fn is_subset(&self, other: &Principal) -> bool {
        self.0.is_subset(&other.0)
    }

    /// The label readable by exactly these users.
    pub fn as_label(&self) -> Result<SecurityLabel, PolicyError> {
        SecurityLabel::from_set(self.0.clone())
    }

    /// Comma-separated, sorted member list.
    pub fn to_csv(&self) -> String {
        self.0.iter().map(UserId::as_str).collect::<Vec<_>>().join(",")
    }

    /// Sort key used for deterministic ordering of principals.
    pub fn sort_key(&self) -> Vec<&str> {
        self.0.iter().map(UserId::as_str).collect()
    }
}

impl fmt::Display for Principal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.to_csv())
    }
}

/// True iff every member of `principal` may read an item carrying `label`.
pub fn authorizes(label: &SecurityLabel, principal: &Principal) -> bool {
    match label {
        SecurityLabel::Public => true,
        SecurityLabel::Users(readers) => principal.users().is_subset(readers),
    }
}

/// Ids of the items readable by every member of `principal`.
///
/// The empty principal reads every item.
pub fn project<'a, I, K>(dataset: I, principal: &Principal) -> BTreeSet<K>
where
    I: IntoIterator<Item = (K, &'a SecurityLabel)>,
    K: Ord,
{
    dataset
        .into_iter()
        .filter(|(_, label)| authorizes(label, principal))
        .map(|(id, _)| id)
        .collect()
}

/// Greatest lower bound of labels: the readers allowed to see an output
/// derived from all of them.
///
/// Public is the identity; an empty sequence yields Public.
pub fn meet_labels<'a, I>(labels: I) -> Result<SecurityLabel, PolicyError>
where
    I: IntoIterator<Item = &'a SecurityLabel>,
{
    let mut acc: Option<BTreeSet<UserId>> = None;
    for label in labels {
        let SecurityLabel::Users(readers) = label else {
            continue;
        };
        acc = Some(match acc {
            None => readers.clone(),
            Some(cur) => cur.intersection(readers).cloned().collect(),
        });
    }
    match acc {
        None => Ok(SecurityLabel::Public),
        Some(set) if set.is_empty() => Err(PolicyError::EmptyIntersection),
        Some(set) => Ok(SecurityLabel::Users(set)),
    }
}

/// True iff data labeled `from` may be released under `to`, i.e. `to`
/// admits no reader that `from` does not already admit.
pub fn can_flow(from: &SecurityLabel, to: &SecurityLabel) -> bool {
    match (from, to) {
        (SecurityLabel::Public, _) => true,
        (SecurityLabel::Users(_), SecurityLabel::Public) => false,
        (SecurityLabel::Users(src), SecurityLabel::Users(dst)) => dst.is_subset(src),
    }
}

/// A label mutation.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(tag = "action", content = "user", rename_all = "snake_case")]
pub enum LabelAction {
    Grant(UserId),
    Revoke(UserId),
    Declassify,
}

/// Applies `action` to `label`, returning the updated label.
pub fn apply_label_action(
    label: &SecurityLabel,
    action: &LabelAction,
) -> Result<SecurityLabel, PolicyError> {
    match (label, action) {
        (_, LabelAction::Declassify) => Ok(SecurityLabel::Public),
        // Public already authorizes the grantee.
        (SecurityLabel::Public, LabelAction::Grant(_)) => Ok(SecurityLabel::Public),
        (SecurityLabel::Public, LabelAction::Revoke(_)) => Err(PolicyError::RevokeOnPublic),
        (SecurityLabel::Users(set), LabelAction::Grant(user)) => {
            let mut set = set.clone();
            set.insert(user.clone());
            Ok(SecurityLabel::Users(set))
        }
        (SecurityLabel::Users(set), LabelAction::Revoke(user)) => {
            let mut set = set.clone();
            set.remove(user);
            SecurityLabel::from_set(set)
        }
    }
}

/// A node of the confidentiality lattice with the items it can read.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct LatticeNode {
    pub principal: Principal,
    pub items: BTreeSet<String>,
}

/// Enumerates the occupied lattice nodes of a labeled dataset.
///
/// Candidates are the exact reader sets of explicitly labeled items plus
/// every singleton user mentioned by any label. Nodes with an empty
/// projection are dropped. Public items show up in every node's projection
/// but never create a node of their own.
pub fn lattice_nodes<'a, I>(dataset: I) -> Vec<LatticeNode>
where
    I: IntoIterator<Item = (&'a str, &'a SecurityLabel)>,
{
    let items: Vec<(&str, &SecurityLabel)> = dataset.into_iter().collect();
    let mut candidates: BTreeSet<Principal> = BTreeSet::new();
    for (_, label) in &items {
        if let SecurityLabel::Users(readers) = label {
            candidates.insert(Principal(readers.clone()));
            for user in readers {
                candidates.insert(Principal::single(user.clone()));
            }
        }
    }
    let mut nodes: Vec<LatticeNode> = candidates
        .into_iter()
        .filter_map(|principal| {
            let projected = project(items.iter().map(|(id, l)| (*id, *l)), &principal);
            if projected.is_empty() {
                return None;
            }
            Some(LatticeNode {
                items: projected.into_iter().map(str::to_owned).collect(),
                principal,
            })
        })
        .collect();
    nodes.sort_by(|a, b| a.principal.sort_key().cmp(&b.principal.sort_key()));
    nodes
}
