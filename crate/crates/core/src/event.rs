use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{DataClass, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Platform {
    FacebookLike,
    TwitterLike,
    YoutubeLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ChatIn,
    ChatOut,
    PostCompose,
    ImageUpload,
    FeedImage,
    ProfileVisit,
    VideoVisit,
}

impl EventKind {
    pub const ALL: [EventKind; 7] = [
        Self::ChatIn,
        Self::ChatOut,
        Self::PostCompose,
        Self::ImageUpload,
        Self::FeedImage,
        Self::ProfileVisit,
        Self::VideoVisit,
    ];

    pub fn direction(self) -> Direction {
        match self {
            Self::ChatOut | Self::PostCompose | Self::ImageUpload => Direction::Outbound,
            _ => Direction::Inbound,
        }
    }

    pub fn data_class(self) -> DataClass {
        match self {
            Self::ChatIn | Self::ChatOut => DataClass::Chat,
            Self::PostCompose => DataClass::Wall,
            Self::ImageUpload => DataClass::Photos,
            Self::FeedImage => DataClass::FriendsWall,
            Self::ProfileVisit => DataClass::TwitterProfiles,
            Self::VideoVisit => DataClass::YoutubeVideos,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ChatIn => "chat_in",
            Self::ChatOut => "chat_out",
            Self::PostCompose => "post_compose",
            Self::ImageUpload => "image_upload",
            Self::FeedImage => "feed_image",
            Self::ProfileVisit => "profile_visit",
            Self::VideoVisit => "video_visit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Inbound,
    Outbound,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventPayload {
    /// A chat line; `peer` is the other participant.
    Chat {
        conversation: String,
        peer: String,
        text: String,
    },
    Text {
        text: String,
    },
    /// Content address (hex SHA-256) of image bytes held in the blob store.
    Image {
        image_ref: String,
    },
    Username {
        username: String,
    },
    Video {
        video_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficEvent {
    pub event_id: String,
    pub member_id: String,
    pub platform: Platform,
    pub kind: EventKind,
    pub payload: EventPayload,
    pub direction: Direction,
    pub captured_at: Timestamp,
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("payload does not match event kind {0:?}")]
pub struct PayloadMismatch(pub EventKind);

impl TrafficEvent {
    pub fn new(
        member_id: &str,
        platform: Platform,
        kind: EventKind,
        payload: EventPayload,
        captured_at: Timestamp,
    ) -> Result<Self, PayloadMismatch> {
        let event = Self {
            event_id: uuid::Uuid::new_v4().to_string(),
            member_id: member_id.to_string(),
            platform,
            kind,
            payload,
            direction: kind.direction(),
            captured_at,
        };
        event.validate()?;
        Ok(event)
    }

    pub fn validate(&self) -> Result<(), PayloadMismatch> {
        let ok = matches!(
            (self.kind, &self.payload),
            (EventKind::ChatIn | EventKind::ChatOut, EventPayload::Chat { .. })
                | (EventKind::PostCompose, EventPayload::Text { .. })
                | (EventKind::ImageUpload | EventKind::FeedImage, EventPayload::Image { .. })
                | (EventKind::ProfileVisit, EventPayload::Username { .. })
                | (EventKind::VideoVisit, EventPayload::Video { .. })
        ) && self.direction == self.kind.direction();
        if ok {
            Ok(())
        } else {
            Err(PayloadMismatch(self.kind))
        }
    }

    pub fn text(&self) -> Option<&str> {
        match &self.payload {
            EventPayload::Chat { text, .. } | EventPayload::Text { text } => Some(text),
            _ => None,
        }
    }

    /// The other party for chat lines and the visited account for profiles.
    pub fn counterpart(&self) -> Option<&str> {
        match &self.payload {
            EventPayload::Chat { peer, .. } => Some(peer),
            EventPayload::Username { username } => Some(username),
            _ => None,
        }
    }

    pub fn image_ref(&self) -> Option<&str> {
        match &self.payload {
            EventPayload::Image { image_ref } => Some(image_ref),
            _ => None,
        }
    }
}

/// One message in a conversation window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatLine {
    pub from: String,
    pub direction: Direction,
    pub text: String,
}

impl ChatLine {
    pub fn inbound(from: &str, text: &str) -> Self {
        Self {
            from: from.to_string(),
            direction: Direction::Inbound,
            text: text.to_string(),
        }
    }

    pub fn outbound(from: &str, text: &str) -> Self {
        Self {
            from: from.to_string(),
            direction: Direction::Outbound,
            text: text.to_string(),
        }
    }
}

pub fn content_address(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
