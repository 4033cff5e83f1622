#!/usr/bin/env python3
"""Regenerate the bundled fixtures: the 100-row labeled CSV corpus
(20 rows per category, schema Class,Tweet) and a replay-poller fixture.

The corpus is deliberately synthetic and mild; its job is to exercise the
classifier (including obfuscated spellings), grouping, and time bucketing,
not to be realistic abuse data.
"""

from __future__ import annotations

import csv
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from osintpipe.replay import generate_replay_fixture  # noqa: E402

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "osintpipe" / "fixtures"

SEXUAL_HARASSMENT = [
    "why won't you send nudes already, everyone else does",
    "that dress shows off your hot body, come sit next to me",
    "I want your body and you know it, stop pretending otherwise",
    "you looked so s3xy in class today I could not stop staring",
    "send nudes or I will tell the whole school you already did",
    "keep wearing that skirt and that hot body to practice",
    "heard you will send nudes to anyone who asks twice",
    "your hot body is the only reason anyone talks to you",
    "dm me something s3xy or I will keep messaging you all night",
    "quit acting shy, just send nudes like you promised",
    "the new intern has a hot body and I said it to her face",
    "told her to send nudes during the study call again",
    "every reply he sends is about my body and it will not stop",
    "she said no but he keeps asking her to send nudes",
    "posted that I want your body under every photo she shares",
    "the group chat keeps rating who has the hottest body",
    "another anonymous account asking for nudes before breakfast",
    "he grabbed the mic and said send nudes to the whole lobby",
    "meeting ran late again, nothing else to report today",
    "does anyone have notes from the morning lecture",
]

DOXING = [
    "posting his home address tonight so everyone can see it",
    "I found her phone number and I am sharing it in the group",
    "his social security digits are going up next if he replies",
    "someone leaked her address in the comments and nobody removed it",
    "want his home address? I will trade it for concert tickets",
    "dropped her phone number in three servers already",
    "they d0x anyone who argues back, careful in that forum",
    "the spreadsheet has her home address and her shift schedule",
    "found the landlord records, posting the home address at noon",
    "reply and I post your phone number where everyone reads it",
    "she changed schools but they leaked her address again",
    "pinned his home address at the top of the thread",
    "the mod saved everyone's phone number before the purge",
    "he pasted my home address under the video like a caption",
    "that account exists only to d0x streamers after hours",
    "my phone number ended up on a sticker downtown, thanks a lot",
    "they mapped the route from the gym to her home address",
    "posting the plate, the building, the home address, all of it",
    "picked up groceries and finished the laundry before dark",
    "the library extended weekend hours for exam season",
]

SLUT_SHAMING = [
    "everyone knows she is a slut, pass it on",
    "look at that fat a$$ pretending the rules apply to her",
    "she sleeps around and the whole dorm keeps score",
    "called her a slut in front of the entire cafeteria",
    "that fat a$$ should not be allowed to post photos",
    "the caption just said slut with twelve laughing faces",
    "she sleeps around, that is the only reason she passed",
    "wrote slut on her locker again, third time this month",
    "why does a fat a$$ like her even come to the pool",
    "the poll asked who sleeps around the most and tagged her",
    "her own friends call her a slut when she leaves the room",
    "screenshotted her outfit and captioned it slut for the server",
    "he tells everyone she sleeps around to excuse himself",
    "the comment section is just slut slut slut for two hundred replies",
    "that fat a$$ ruined the class photo, repost it without her",
    "made a burner just to call her a slut every morning",
    "the rumor she sleeps around started from one edited chat",
    "they rate girls in the hallway and shout slut at the short ones",
    "rainy afternoon, finally finished the puzzle on the table",
    "the cafeteria added a vegetarian option on Fridays",
]

REVENGE_PORN = [
    "he shared her intimate photos after the breakup, report him",
    "the leaked photos of my ex are in that channel, go look",
    "threatening revenge porn unless she answers his calls",
    "someone uploaded intimate photos from her old cloud account",
    "the forum trades leaked photos like collector cards",
    "his revenge porn thread got mirrored before the takedown",
    "she begged him to delete the intimate photos, he posted them",
    "leaked photos of the junior class president are spreading",
    "he keeps a folder of intimate photos as insurance, she said",
    "the revenge porn site rehosted everything under a new name",
    "sent her intimate photos to her boss from a burner mail",
    "the leaked photos came with her handle and school name",
    "swears he will post revenge porn if she blocks him again",
    "her intimate photos were the prize in their private contest",
    "downloaded the leaked photos before moderators scrubbed them",
    "the revenge porn archive has a search by school now",
    "he cropped the intimate photos to dodge the filters",
    "that channel reposts leaked photos within minutes of removal",
    "the bus was late but the driver waved everyone on anyway",
    "signed up for the pottery class that starts next month",
]

CYBERSTALKING = [
    "you lo$er I saw you at the mall and followed you home",
    "you talk so much sh!t for someone I am watching every day",
    "I am watching you from the parking lot right now",
    "new account same message: I know where you live",
    "he keeps following you from app to app after every block",
    "what a lo$er, I logged your time at the gym again tonight",
    "said he is outside and knows where you live, call someone",
    "that sh!t you posted at 9 I read at 9, I am always first",
    "watching you type and delete, type and delete, cute",
    "he mapped my runs and now he is following you too",
    "every burner says the same thing: I am watching you",
    "this lo$er made his fourth account just to watch my stories",
    "they said I know where you live and posted a street sign",
    "quit acting like I am not watching you at work too",
    "he recites my schedule back to me like a lo$er trophy",
    "the replies come seconds after I post, he is following you everywhere",
    "talks sh!t then waits by the station where she changes trains",
    "three months of I know where you live, every single morning",
    "finally fixed the bike brakes, smooth ride into town",
    "the night market opens again this weekend, bring cash",
]

CORPUS = [
    ("Sexual Harassment", SEXUAL_HARASSMENT),
    ("Doxing", DOXING),
    ("Slut Shaming", SLUT_SHAMING),
    ("Revenge Porn", REVENGE_PORN),
    ("Cyberstalking", CYBERSTALKING),
]


def write_corpus(path: Path) -> None:
    rows = []
    for label, texts in CORPUS:
        assert len(texts) == 20, f"{label} needs exactly 20 rows, has {len(texts)}"
        rows.extend((label, text) for text in texts)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Class", "Tweet"])
        writer.writerows(rows)
    print(f"wrote {path} ({len(rows)} rows)")


def main() -> None:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    write_corpus(FIXTURES / "cyberbullying_fixture.csv")
    replay_dir = FIXTURES / "replay"
    generate_replay_fixture(replay_dir, count=30, seed=7)
    print(f"wrote {replay_dir / 'events.json'}")


if __name__ == "__main__":
    main()
