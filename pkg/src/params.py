settings = {
    'crypto': {
        'master_key_bytes': 32, #256-bit random AES key
        'token_bytes': 16, #128-bit one time token
        'rsa_bits': 2048,
        'rsa_exponent': 65537,
        'oaep_capacity': 190, #max plaintext for OAEP-SHA-256 under RSA-2048
        'assertion_window': 120, #seconds, freshness window for signed login assertions
    },
    'store': {
        'format_version': 1,
        'session_idle': 15 * 60, #seconds of inactivity before a session expires
        'mailbox_requires_session': True, #pairing-time MasterKeyUpdate writes need a live mobile session
    },
    'identity': {
        'issuer': 'https://example.com',
        'attempt_ttl': 120, #seconds a pending login attempt stays answerable
        'assertion_ttl': 300, #seconds an identity assertion stays valid at the RP
    },
    'extension': {
        'poll_interval': 1, #seconds of simulated clock between mailbox checks
        'poll_deadline': 60,
    },
    'acceptance': {
        'runs': { #seeded runs per suite
            'pairing': 100, 'recovery': 100, 'breach': 10, 'substitution': 100, 'forge': 1,
            'tamper': 100, 'exact_url': 10, 'timeout': 10, 'assertion': 25, 'determinism': 3,
        },
        'fuzz': 1000, #forged mailbox payloads in one forge run
        'sentinels': 20, #credentials saved for the breach scan
    },
    'user': {'user_id': 'alice', 'email': 'alice@example.com', 'phone': '+1-555-0100'},
    'test_hooks': False, #enables test-only export/leak hooks; never on in a real run
    'parallel': False,
    'core': -1, #number of cores to dedicate to parallel run, -1 means all available cores
}
