#pragma once

#include <charconv>
#include <cstddef>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "timesbert/errors.hpp"

namespace timesbert {

/// Flat `key = value` text, one entry per line, `#` starts a comment.
class KeyValueConfig {
public:
    static KeyValueConfig parse(const std::string& text) {
        KeyValueConfig kv;
        std::istringstream in(text);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            const auto s = strip(line);
            if (s.empty()) continue;
            const auto eq = s.find('=');
            if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
            const auto key = strip(s.substr(0, eq));
            if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
            kv.values_[key] = strip(s.substr(eq + 1));
        }
        return kv;
    }

    static KeyValueConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot read config file " + path);
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str());
    }

    std::string to_text() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
        return out;
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    void set(const std::string& key, double value) {
        std::ostringstream os;
        os.precision(17);
        os << value;
        values_[key] = os.str();
    }
    void set(const std::string& key, std::size_t value) { values_[key] = std::to_string(value); }
    void set(const std::string& key, bool value) { values_[key] = value ? "true" : "false"; }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    std::size_t get_size(const std::string& key, std::size_t fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::size_t v = 0;
        auto [p, ec] = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
        if (ec != std::errc{} || p != it->second.data() + it->second.size())
            throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + it->second + "'");
        return v;
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t used = 0;
            const double v = std::stod(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': expected a number, got '" + it->second + "'");
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw ConfigError("config key '" + key + "': expected true/false, got '" + it->second + "'");
    }

    const std::map<std::string, std::string>& entries() const { return values_; }

    void merge(const KeyValueConfig& other) {
        for (const auto& [k, v] : other.values_) values_[k] = v;
    }

private:
    static std::string strip(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return {};
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    std::map<std::string, std::string> values_;
};

/// Backbone shape. Defaults are the desk-scale model; the BERT-base layout is
/// L=12, D=768, A=12.
struct EncoderConfig {
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t ffn_mult = 4;
    double dropout = 0.1;
    std::size_t context_len = 512;
    std::size_t patch_len = 24;
    std::size_t n_domains = 1;  // M, width of the domain classifier
    bool channel_independent = false;
    double ln_eps = 1e-5;

    void validate() const {
        if (d_model == 0 || n_heads == 0 || ffn_mult == 0 || context_len == 0 || patch_len == 0 || n_domains == 0)
            throw ConfigError("encoder config: sizes must be positive");
        if (d_model % n_heads != 0)
            throw ConfigError("encoder config: d_model " + std::to_string(d_model) + " is not divisible by " +
                              std::to_string(n_heads) + " heads");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("encoder config: dropout must lie in [0, 1)");
    }

    void write(KeyValueConfig& kv) const {
        kv.set("d_model", d_model);
        kv.set("n_layers", n_layers);
        kv.set("n_heads", n_heads);
        kv.set("ffn_mult", ffn_mult);
        kv.set("dropout", dropout);
        kv.set("context_len", context_len);
        kv.set("patch_len", patch_len);
        kv.set("n_domains", n_domains);
        kv.set("channel_independent", channel_independent);
        kv.set("ln_eps", ln_eps);
    }

    static EncoderConfig read(const KeyValueConfig& kv) { return read(kv, EncoderConfig()); }

    static EncoderConfig read(const KeyValueConfig& kv, const EncoderConfig& base) {
        EncoderConfig c = base;
        c.d_model = kv.get_size("d_model", c.d_model);
        c.n_layers = kv.get_size("n_layers", c.n_layers);
        c.n_heads = kv.get_size("n_heads", c.n_heads);
        c.ffn_mult = kv.get_size("ffn_mult", c.ffn_mult);
        c.dropout = kv.get_double("dropout", c.dropout);
        c.context_len = kv.get_size("context_len", c.context_len);
        c.patch_len = kv.get_size("patch_len", c.patch_len);
        c.n_domains = kv.get_size("n_domains", c.n_domains);
        c.channel_independent = kv.get_bool("channel_independent", c.channel_independent);
        c.ln_eps = kv.get_double("ln_eps", c.ln_eps);
        return c;
    }

    bool operator==(const EncoderConfig&) const = default;
};

// Per-task patch-length presets.
inline constexpr std::size_t kPatchLenClassify = 36;
inline constexpr std::size_t kPatchLenImpute = 24;
inline constexpr std::size_t kPatchLenForecast = 4;
inline constexpr std::size_t kPatchLenAnomaly = 4;

}  // namespace timesbert
