#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

namespace imekit::synthetic {

/// One relation of the synthetic persona domain. `cue` is the phrase that
/// follows the subject when the fact is stated ("Alice" + "'s dog is called ").
/// Templates use {S} for the subject and {E} for the entity.
struct Relation {
    std::string key;
    std::string cue;
    std::string declarative;
    std::string query;
    std::vector<std::string> paraphrases;
    std::string alt_statement; // phrasing the extraction rules do not recognize
    std::vector<std::string> entities;
};

inline std::string fill(std::string_view tmpl, std::string_view subject, std::string_view entity = {}) {
    std::string out;
    for (std::size_t i = 0; i < tmpl.size(); ++i) {
        if (tmpl.substr(i).starts_with("{S}")) {
            out.append(subject);
            i += 2;
        } else if (tmpl.substr(i).starts_with("{E}")) {
            out.append(entity);
            i += 2;
        } else {
            out.push_back(tmpl[i]);
        }
    }
    return out;
}

inline const std::vector<Relation> & relations() {
    static const std::vector<Relation> r = {
        {"food", "'s favorite food is ", "{S}'s favorite food is {E}.", "{S} favorite food",
         {"what food does {S} love", "{S} best loved meal", "which dish is {S} fond of"},
         "{S} can never say no to {E}.",
         {"ramen", "dumplings", "paella", "lasagna", "pho", "biryani", "tacos", "sushi", "risotto", "falafel",
          "goulash", "moussaka"}},
        {"city", " lives in ", "{S} lives in {E}.", "where {S} lives",
         {"which city is {S} living in", "{S} home city", "where is {S} based now"},
         "{S} moved over to {E} last year.",
         {"Lisbon", "Osaka", "Denver", "Nairobi", "Krakow", "Valparaiso", "Tallinn", "Hanoi", "Calgary", "Porto",
          "Bergen", "Adelaide"}},
        {"work", " works at ", "{S} works at {E}.", "where {S} works",
         {"{S} employer company", "which company employs {S}", "who does {S} work for"},
         "{S} got a job with {E}.",
         {"Acme Robotics", "Bluefin Labs", "Cobalt Bank", "Delta Freight", "Evergreen Care", "Foxglove Studio",
          "Granite Mutual", "Harbor Cargo", "Ironwood Games", "Juniper Foods", "Kestrel Aero", "Lumen Media"}},
        {"pet", "'s dog is called ", "{S}'s dog is called {E}.", "{S} dog name",
         {"what is the name of {S}'s dog", "{S} pet dog called", "name of the dog {S} owns"},
         "{S} adopted a puppy named {E}.",
         {"Biscuit", "Pepper", "Waffles", "Noodle", "Ziggy", "Mochi", "Pretzel", "Bandit", "Clover", "Tofu",
          "Gizmo", "Sprout"}},
        {"birthday", "'s birthday is on ", "{S}'s birthday is on {E}.", "{S} birthday date",
         {"when was {S} born", "date of {S}'s birthday", "{S} birth day"},
         "{S} celebrates turning older on {E}.",
         {"March 3", "July 19", "October 8", "January 27", "May 14", "August 2", "December 11", "April 30",
          "June 6", "September 21", "February 9", "November 16"}},
        {"phone", "'s phone number is ", "{S}'s phone number is {E}.", "{S} phone number",
         {"how do I call {S}", "{S} contact number", "number to ring {S}"},
         "You can always reach {S} at {E}.",
         {"555-0142", "555-0187", "555-0113", "555-0169", "555-0124", "555-0198", "555-0131", "555-0156",
          "555-0175", "555-0108", "555-0149", "555-0162"}},
        {"team", " supports ", "{S} supports {E}.", "which team {S} supports",
         {"{S} favorite football club", "what club does {S} cheer for", "team {S} follows"},
         "{S} never misses a match of {E}.",
         {"Red Falcons", "Harbor United", "North Wolves", "Atletico Sol", "Blue Comets", "River Plate",
          "Iron Lions", "Green Hornets", "City Rovers", "Golden Bears", "Storm FC", "Valley Kings"}},
        {"drink", "'s favorite drink is ", "{S}'s favorite drink is {E}.", "{S} favorite drink",
         {"what does {S} like to drink", "{S} preferred beverage", "which drink does {S} order"},
         "{S} always orders {E}.",
         {"matcha latte", "ginger beer", "cold brew", "mango lassi", "hibiscus tea", "horchata", "flat white",
          "kombucha", "yerba mate", "chai", "lemonade", "oolong"}},
        {"hobby", " likes to play ", "{S} likes to play {E}.", "what {S} likes to play",
         {"{S} favorite game", "which game does {S} enjoy", "{S} hobby to play"},
         "{S} spends every weekend on {E}.",
         {"chess", "badminton", "the cello", "mahjong", "volleyball", "the ukulele", "go", "table tennis",
          "the drums", "bridge", "squash", "the violin"}},
        {"school", " studied at ", "{S} studied at {E}.", "where {S} studied",
         {"{S} university", "which school did {S} attend", "{S} alma mater"},
         "{S} graduated from {E}.",
         {"Northfield", "Lakeside Tech", "Westbrook", "Eastmoor", "Kingsbridge", "Ravenwood", "Stonehill",
          "Brightwater", "Oakridge", "Silverlake", "Maplewood", "Fairhaven"}},
        {"car", " drives a ", "{S} drives a {E}.", "what car {S} drives",
         {"{S} vehicle model", "which car does {S} own", "car that {S} has"},
         "{S} just bought a {E}.",
         {"blue Corolla", "red Civic", "white Golf", "grey Model 3", "green Beetle", "black Mazda 3",
          "silver Leaf", "yellow Mini", "orange Jazz", "brown Volvo", "teal Fiesta", "navy Outback"}},
        {"book", "'s favorite book is ", "{S}'s favorite book is {E}.", "{S} favorite book",
         {"which book does {S} love", "{S} best loved novel", "book {S} always rereads"},
         "{S} keeps rereading {E}.",
         {"Dune", "Emma", "Beloved", "Ulysses", "Middlemarch", "Solaris", "Rebecca", "Kindred", "Persuasion",
          "Siddhartha", "Frankenstein", "Stoner"}},
    };
    return r;
}

inline const Relation * find_relation(std::string_view key) {
    for (const auto & r : relations()) {
        if (r.key == key) return &r;
    }
    return nullptr;
}

inline const std::vector<std::string> & names() {
    static const std::vector<std::string> n = {
        "Alice", "Bruno",  "Chen",  "Dana",   "Emeka", "Farah", "Gustav", "Hana",  "Ivan",  "Jia",
        "Kofi",  "Lena",   "Mateo", "Nadia",  "Omar",  "Priya", "Quinn",  "Rosa",  "Sven",  "Tariq",
        "Uma",   "Viktor", "Wen",   "Ximena", "Yusuf", "Zoe",   "Aiko",   "Boris", "Carmen", "Dmitri",
        "Elif",  "Felix",  "Greta", "Hugo",   "Ines",  "Jonas", "Kira",   "Luca",  "Mira",  "Nico"};
    return n;
}

/// Small chat corpus for the n-gram continuation model.
inline const std::vector<std::string> & corpus() {
    static const std::vector<std::string> c = {
        "see you at the station at six",
        "thanks so much for dinner last night",
        "I will call you when I get home",
        "can we move the meeting to tomorrow morning",
        "sounds good to me, let me know when you are free",
        "sorry I am running a bit late today",
        "the weather is lovely this afternoon",
        "did you see the game last night",
        "let me check my calendar and get back to you",
        "happy birthday, hope you have a great day",
        "I am on my way, be there in ten minutes",
        "that sounds like a great plan",
        "we should grab coffee sometime this week",
        "I just finished work, heading home now",
        "thank you for the help with the move",
        "are you coming to the party on saturday",
        "I think the train leaves at seven",
        "no worries, take your time",
        "good morning, how did you sleep",
        "I will send you the photos later tonight",
        "let us meet at the usual place",
        "I forgot my keys again",
        "the concert was amazing",
        "can you pick up some bread on the way",
        "see you soon",
        "good night and sleep well",
        "I am so tired after the long day",
        "what time works for you tomorrow",
        "the new cafe near the park is great",
        "I will be there in a minute",
    };
    return c;
}

/// Chatter with no durable fact in it.
inline const std::vector<std::string> & noise_lines() {
    static const std::vector<std::string> n = {
        "lol ok",
        "haha that is so funny",
        "hmm let me think about it",
        "ok see you later",
        "sure thing",
        "brb",
        "wow nice",
        "what a day",
        "yeah totally",
        "no idea honestly",
        "sounds fun",
        "omg really",
        "cool cool",
        "I guess so",
        "the weather is nice today",
        "I am bored",
        "this song is stuck in my head",
        "good morning",
        "nah not really",
        "on my way",
    };
    return n;
}

inline constexpr std::array<std::string_view, 3> styles = {"formal", "casual", "playful"};

inline std::string_view style_suffix(std::string_view style) {
    if (style == "formal") return ".";
    if (style == "playful") return " :)";
    return "!";
}

} // namespace imekit::synthetic
