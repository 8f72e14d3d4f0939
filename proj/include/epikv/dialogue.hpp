// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cctype>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "epikv/numerics.hpp"

namespace epikv {

class ParseError : public Error {
public:
    explicit ParseError(const std::string& what) : Error(what) {}
};

enum class Role { speaker_1, speaker_2, user, assistant };

inline std::string_view role_name(Role r) {
    switch (r) {
        case Role::speaker_1: return "speaker_1";
        case Role::speaker_2: return "speaker_2";
        case Role::user: return "user";
        case Role::assistant: return "assistant";
    }
    return "unknown";
}

inline std::optional<Role> role_from_name(std::string_view s) {
    if (s == "speaker_1") return Role::speaker_1;
    if (s == "speaker_2") return Role::speaker_2;
    if (s == "user") return Role::user;
    if (s == "assistant") return Role::assistant;
    return std::nullopt;
}

struct Utterance {
    Role role = Role::speaker_1;
    std::string text;
    std::size_t turn_index = 0;

    bool operator==(const Utterance&) const = default;
};

struct ConversationHistory {
    std::vector<Utterance> utterances;
    /// Turn indices at which a new session starts (index of the first turn
    /// following a session break record).
    std::vector<std::size_t> session_boundaries;

    std::size_t turn_count() const { return utterances.size(); }

    bool operator==(const ConversationHistory&) const = default;
};

struct Query {
    std::size_t query_index = 0;
    std::string text;
    std::optional<std::string> gold_answer;
    std::optional<std::string> topic_label;

    bool operator==(const Query&) const = default;
};

struct QuerySet {
    std::vector<Query> queries;

    bool operator==(const QuerySet&) const = default;
};

namespace detail {

inline bool is_blank(std::string_view s) {
    for (char c : s) {
        if (!std::isspace(static_cast<unsigned char>(c))) return false;
    }
    return true;
}

}  // namespace detail

/// Parses a line-oriented conversation file. Each non-empty line is a JSON
/// object of kind "turn", "session_break" or "query" (unknown fields are
/// ignored, unknown kinds are an error). Errors carry the 1-based line
/// number.
inline std::pair<ConversationHistory, QuerySet> parse_conversation(std::istream& in) {
    ConversationHistory history;
    QuerySet queries;
    std::string line;
    std::size_t line_no = 0;
    bool saw_record = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::is_blank(line)) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
        }
        saw_record = true;
        const std::string kind = rec.value("kind", "");
        if (kind == "turn") {
            if (!rec.contains("role") || !rec.contains("text")) {
                throw ParseError("line " + std::to_string(line_no) + ": turn needs role and text");
            }
            auto role = role_from_name(rec["role"].get<std::string>());
            if (!role) {
                throw ParseError("line " + std::to_string(line_no) + ": unknown role '" +
                                 rec["role"].get<std::string>() + "'");
            }
            std::string text = rec["text"].get<std::string>();
            if (detail::is_blank(text)) {
                throw ParseError("line " + std::to_string(line_no) + ": empty turn text");
            }
            history.utterances.push_back({*role, std::move(text), history.utterances.size()});
        } else if (kind == "session_break") {
            history.session_boundaries.push_back(history.utterances.size());
        } else if (kind == "query") {
            if (!rec.contains("text")) {
                throw ParseError("line " + std::to_string(line_no) + ": query needs text");
            }
            Query q;
            q.query_index = queries.queries.size();
            q.text = rec["text"].get<std::string>();
            if (rec.contains("gold")) q.gold_answer = rec["gold"].get<std::string>();
            if (rec.contains("topic")) q.topic_label = rec["topic"].get<std::string>();
            queries.queries.push_back(std::move(q));
        } else {
            throw ParseError("line " + std::to_string(line_no) + ": unknown record kind '" + kind +
                             "'");
        }
    }
    if (!saw_record) {
        throw ParseError("empty conversation file");
    }
    if (history.utterances.empty()) {
        throw ParseError("conversation has no turns");
    }
    if (queries.queries.empty()) {
        throw ParseError("conversation has no queries");
    }
    return {std::move(history), std::move(queries)};
}

/// Writes the structures back in the file format accepted by
/// parse_conversation. Re-parsing the output reproduces the input structures.
inline void serialize_conversation(const ConversationHistory& history, const QuerySet& queries,
                                   std::ostream& out) {
    std::size_t next_boundary = 0;
    for (std::size_t i = 0; i < history.utterances.size(); ++i) {
        while (next_boundary < history.session_boundaries.size() &&
               history.session_boundaries[next_boundary] == i) {
            out << R"({"kind":"session_break"})" << '\n';
            ++next_boundary;
        }
        nlohmann::ordered_json rec;
        rec["kind"] = "turn";
        rec["role"] = role_name(history.utterances[i].role);
        rec["text"] = history.utterances[i].text;
        out << rec.dump() << '\n';
    }
    while (next_boundary < history.session_boundaries.size()) {
        out << R"({"kind":"session_break"})" << '\n';
        ++next_boundary;
    }
    for (const Query& q : queries.queries) {
        nlohmann::ordered_json rec;
        rec["kind"] = "query";
        rec["text"] = q.text;
        if (q.gold_answer) rec["gold"] = *q.gold_answer;
        if (q.topic_label) rec["topic"] = *q.topic_label;
        out << rec.dump() << '\n';
    }
}

using TokenId = std::uint32_t;

inline constexpr std::size_t kDefaultVocab = 4096;
inline constexpr std::uint64_t kTokenizerSeed = 0x45504B5641ULL;

/// Separator token id used between rendered turns; word tokens never map to
/// it.
inline constexpr TokenId separator_token(std::size_t vocab) {
    return static_cast<TokenId>(vocab - 1);
}

/// Deterministic toy tokenizer: lowercase, split on non-alphanumeric bytes,
/// hash each word into the vocabulary. Identical text yields identical ids.
inline std::vector<TokenId> tokenize(std::string_view text, std::size_t vocab = kDefaultVocab,
                                     std::uint64_t seed = kTokenizerSeed) {
    std::vector<TokenId> out;
    std::string word;
    auto flush = [&] {
        if (word.empty()) return;
        const std::uint64_t h = splitmix64(fnv1a64(word) ^ seed);
        out.push_back(static_cast<TokenId>(h % (vocab - 1)));
        word.clear();
    };
    for (char c : text) {
        const auto uc = static_cast<unsigned char>(c);
        if (std::isalnum(uc)) {
            word.push_back(static_cast<char>(std::tolower(uc)));
        } else {
            flush();
        }
    }
    flush();
    return out;
}

struct TokenSource {
    std::size_t turn_index = 0;
    Role role = Role::speaker_1;

    bool operator==(const TokenSource&) const = default;
};

struct RenderedHistory {
    std::vector<TokenId> tokens;
    std::vector<TokenSource> source;  // one entry per token
};

/// Renders a span of utterances as "role: text" per turn, separated by the
/// dedicated separator token. Separator tokens map to the preceding turn.
inline RenderedHistory render_utterances(std::span<const Utterance> turns,
                                         std::size_t vocab = kDefaultVocab) {
    RenderedHistory rendered;
    for (std::size_t i = 0; i < turns.size(); ++i) {
        if (i > 0) {
            rendered.tokens.push_back(separator_token(vocab));
            rendered.source.push_back({turns[i - 1].turn_index, turns[i - 1].role});
        }
        std::string line = std::string(role_name(turns[i].role)) + ": " + turns[i].text;
        for (TokenId id : tokenize(line, vocab)) {
            rendered.tokens.push_back(id);
            rendered.source.push_back({turns[i].turn_index, turns[i].role});
        }
    }
    return rendered;
}

/// Renders the full history into the token stream consumed by prefill.
inline RenderedHistory render_history_tokens(const ConversationHistory& history,
                                             std::size_t vocab = kDefaultVocab) {
    if (history.utterances.empty()) {
        throw DimensionError("render_history_tokens: empty history");
    }
    return render_utterances(history.utterances, vocab);
}

}  // namespace epikv
